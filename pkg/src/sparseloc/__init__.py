"""Sparse-voxel place recognition engine.

Axis-factorized sparse convolutions with selective point/channel gating,
an encoder-decoder descriptor network, exact descriptor retrieval, and a
desk-scale synthetic benchmark. See the `cli` module for the command-line
surface.
"""

__version__ = "0.1.0"

from sparseloc.model import ModelConfig, ModelWeights, forward, parameter_count
from sparseloc.ops import gem_pool, rank1_reconstruct
from sparseloc.retrieval import DescriptorDB, evaluate, mine_pairs
from sparseloc.sparse import SparseTensor, voxelize

__all__ = [
    "DescriptorDB",
    "ModelConfig",
    "ModelWeights",
    "SparseTensor",
    "__version__",
    "evaluate",
    "forward",
    "gem_pool",
    "mine_pairs",
    "parameter_count",
    "rank1_reconstruct",
    "voxelize",
]
