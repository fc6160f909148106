"""Command-line surface: extraction, indexing, retrieval, evaluation,
toy training, benchmarking, the ablation grid and self-verification.

Every command writes a JSON run manifest next to its primary output, all
file outputs go through write-to-temp-then-rename, and user-visible
orderings are sorted. Exit codes: 0 ok, 1 usage, 2 missing input,
3 invalid data.
"""

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

import sparseloc
from sparseloc import backend, errors
from sparseloc.data import generate_world, load_bin, load_catalog, materialize
from sparseloc.model import ModelConfig, ModelWeights, forward
from sparseloc.retrieval import DbEntry, DescriptorDB, evaluate, mine_pairs
from sparseloc.train import TrainSettings, train_toy
from sparseloc.weights_io import load_config, load_weights, save_config, save_weights

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING = 2
EXIT_DATA = 3


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def atomic_write(path, payload) -> None:
    """Write bytes/str to `path` via a temp file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(payload, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(command: str, args, outputs, started: float, manifest_path=None):
    record = {
        "command": command,
        "config": getattr(args, "config", None),
        "weights": getattr(args, "weights", None),
        "seed": getattr(args, "seed", None),
        "engine_version": sparseloc.__version__,
        "backend": backend.active_backend(),
        "wall_time_s": round(time.time() - started, 3),
        "outputs": [str(p) for p in outputs],
    }
    if manifest_path is None:
        base = Path(outputs[0]) if outputs else Path(f"{command}-manifest")
        manifest_path = base.with_name(base.name + ".manifest.json")
    atomic_write(manifest_path, json.dumps(record, indent=2) + "\n")


def _load_model(args):
    cfg = load_config(args.config)
    weights = load_weights(args.weights)
    weights.validate(cfg)
    return cfg, weights


def _preset_config(name: str) -> ModelConfig:
    if name == "desk":
        return ModelConfig.desk()
    if name == "full":
        return ModelConfig()
    raise UsageError(f"unknown preset {name!r}")


# -- commands -------------------------------------------------------------------


def cmd_init(args):
    started = time.time()
    cfg = _preset_config(args.preset)
    weights = ModelWeights.init_random(cfg, args.seed)
    buf = io.BytesIO()
    save_weights(buf, weights)
    atomic_write(args.out, buf.getvalue())
    save_config(args.config_out, cfg)
    write_manifest("init", args, [args.out, args.config_out], started)
    print(f"wrote {args.out} ({len(weights.names())} tensors) and {args.config_out}")
    return EXIT_OK


def _input_bins(target: str):
    path = Path(target)
    if path.is_dir():
        files = sorted(path.glob("*.bin"))
        if not files:
            raise MissingInput(f"no inputs: no .bin files under {path}")
        return files
    if not path.exists():
        raise MissingInput(f"no inputs: {path} does not exist")
    return [path]


def cmd_extract(args):
    started = time.time()
    cfg, weights = _load_model(args)
    files = _input_bins(args.input)
    lines = []
    dumps = []
    for f in files:
        cloud = load_bin(f)
        g, trace = forward(cloud, weights, cfg, want_trace=args.dump_attention is not None)
        desc = ", ".join(format(v, ".17g") for v in g)
        lines.append(f'{{"id": {json.dumps(f.stem)}, "descriptor": [{desc}]}}')
        if args.dump_attention is not None:
            dumps.extend(_attention_files(args.dump_attention, f.stem, trace))
    atomic_write(args.out, "\n".join(lines) + "\n")
    write_manifest("extract", args, [args.out, *dumps], started)
    print(f"extracted {len(files)} descriptors -> {args.out}")
    return EXIT_OK


def _attention_files(out_dir, stem, trace):
    written = []
    for label, coords, scores in trace.attention:
        path = Path(out_dir) / f"{stem}.{label}.csv"
        buf = io.StringIO()
        w = csv.writer(buf)
        if label.endswith(".point"):  # one score per voxel
            w.writerow(["coord_i", "coord_j", "coord_k", "score"])
            for row, s in zip(coords, scores):
                w.writerow([row[1], row[2], row[3], format(s, ".10g")])
        else:  # channel gate: one score per channel
            w.writerow(["channel", "score"])
            for c, s in enumerate(scores):
                w.writerow([c, format(s, ".10g")])
        atomic_write(path, buf.getvalue())
        written.append(path)
    return written


def _read_descriptors(path):
    if not Path(path).exists():
        raise MissingInput(f"no inputs: {path} does not exist")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out[rec["id"]] = np.asarray(rec["descriptor"], dtype=np.float64)
            except (KeyError, ValueError) as exc:
                raise errors.ParseError(f"bad descriptor record: {exc}", lineno) from exc
    if not out:
        raise MissingInput(f"no inputs: {path} is empty")
    return out


def cmd_index(args):
    started = time.time()
    descs = _read_descriptors(args.descriptors)
    catalog = {r.id: r for r in load_catalog(args.catalog, check_files=False)}
    db = DescriptorDB()
    for did in sorted(descs):
        if did not in catalog:
            raise errors.ParseError(f"descriptor id {did!r} missing from catalog", 0)
        row = catalog[did]
        db.add(DbEntry(did, row.easting, row.northing, descs[did]))
    buf = io.StringIO()
    db.save(buf)
    atomic_write(args.db, buf.getvalue())
    write_manifest("index", args, [args.db], started)
    print(f"indexed {len(db)} descriptors -> {args.db}")
    return EXIT_OK


def cmd_query(args):
    started = time.time()
    if not Path(args.db).exists():
        raise MissingInput(f"no inputs: {args.db} does not exist")
    db = DescriptorDB.load(args.db)
    descs = _read_descriptors(args.descriptors)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["query_id", "rank", "match_id", "distance"])
    for qid in sorted(descs):
        for rank, (mid, dist) in enumerate(db.query(descs[qid], args.k), 1):
            w.writerow([qid, rank, mid, format(dist, ".10g")])
    atomic_write(args.out, buf.getvalue())
    write_manifest("query", args, [args.out], started)
    print(f"ranked {len(descs)} queries -> {args.out}")
    return EXIT_OK


def cmd_eval(args):
    started = time.time()
    if not Path(args.db).exists():
        raise MissingInput(f"no inputs: {args.db} does not exist")
    db = DescriptorDB.load(args.db)
    descs = _read_descriptors(args.descriptors)
    catalog = {r.id: r for r in load_catalog(args.catalog, check_files=False)}
    queries = []
    for qid in sorted(descs):
        if qid not in catalog:
            raise errors.ParseError(f"query id {qid!r} missing from catalog", 0)
        row = catalog[qid]
        queries.append((descs[qid], row.easting, row.northing))
    report = evaluate(queries, db, radius=args.radius)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["metric", "value"])
    w.writerow(["ar_at_1", f"{report.ar_at_1:.2f}"])
    w.writerow(["ar_at_1pct", f"{report.ar_at_1pct:.2f}"])
    w.writerow(["queries", report.query_count])
    w.writerow(["excluded", report.excluded])
    atomic_write(args.out, buf.getvalue())
    write_manifest("eval", args, [args.out], started)
    print(f"AR@1 {report.ar_at_1:.2f}  AR@1% {report.ar_at_1pct:.2f}  "
          f"({report.query_count} queries, {report.excluded} excluded)")
    return EXIT_OK


def cmd_pairs(args):
    started = time.time()
    catalog = load_catalog(args.catalog, check_files=False)
    pos, neg = mine_pairs([(r.id, r.easting, r.northing) for r in catalog],
                          pos_radius=args.pos, neg_radius=args.neg)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["kind", "id_a", "id_b"])
    for a, b in pos:
        w.writerow(["positive", a, b])
    for a, b in neg:
        w.writerow(["negative", a, b])
    atomic_write(args.out, buf.getvalue())
    write_manifest("pairs", args, [args.out], started)
    print(f"{len(pos)} positive / {len(neg)} negative pairs -> {args.out}")
    return EXIT_OK


def cmd_gen_world(args):
    started = time.time()
    world = generate_world(args.seed, args.places, spacing=args.spacing,
                           n_passes=args.passes)
    out = materialize(world, args.out_dir)
    write_manifest("gen-world", args, [out / "catalog.csv"], started)
    print(f"world seed={args.seed}: {len(world.catalog)} submaps -> {out}")
    return EXIT_OK


def cmd_train(args):
    started = time.time()
    cfg = _preset_config(args.preset)
    world = generate_world(args.seed, args.places, spacing=args.spacing,
                           n_passes=args.passes)
    settings = TrainSettings(lr=args.lr, margin=args.margin)
    weights, log = train_toy(world, cfg, epochs=args.epochs, seed=args.seed,
                             settings=settings)
    buf = io.BytesIO()
    save_weights(buf, weights)
    atomic_write(args.out, buf.getvalue())
    save_config(args.config_out, cfg)
    atomic_write(args.log, log.to_csv())
    write_manifest("train", args, [args.out, args.config_out, args.log], started)
    last = log.rows[-1] if log.rows else (None, float("nan"), 0)
    print(f"trained {args.epochs} epochs; final mean loss {last[1]:.4f} -> {args.out}")
    return EXIT_OK


def cmd_ablate(args):
    started = time.time()
    world = generate_world(args.seed, args.places, spacing=args.spacing)
    rows = []
    for axis in ("x", "y", "z"):
        for depth in range(0, len(ModelConfig.desk().channels) + 1):
            cfg = ModelConfig.desk(extra_axis=axis, dilation_depth=depth)
            if args.epochs > 0:
                weights, _ = train_toy(world, cfg, epochs=args.epochs, seed=args.seed)
            else:
                weights = ModelWeights.init_random(cfg, args.seed)
            rep = _world_eval(world, weights, cfg)
            rows.append((axis, depth, rep.ar_at_1, rep.ar_at_1pct))
            print(f"extra-axis {axis} dilation-depth {depth}: "
                  f"AR@1 {rep.ar_at_1:.2f} AR@1% {rep.ar_at_1pct:.2f}")
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["extra_axis", "dilation_depth", "ar_at_1", "ar_at_1pct"])
    for axis, depth, a1, apct in rows:
        w.writerow([axis, depth, f"{a1:.2f}", f"{apct:.2f}"])
    atomic_write(args.out, buf.getvalue())
    write_manifest("ablate", args, [args.out], started)
    print(f"ablation grid ({len(rows)} configurations) -> {args.out}")
    return EXIT_OK


def _world_eval(world, weights, cfg):
    db = DescriptorDB()
    queries = []
    for r in world.catalog:
        g, _ = forward(world.submaps[r.id], weights, cfg)
        if r.id.endswith("_r0"):
            db.add(DbEntry(r.id, r.easting, r.northing, g))
        else:
            queries.append((g, r.easting, r.northing))
    return evaluate(queries, db)


def cmd_bench(args):
    started = time.time()
    backends = [args.backend] if args.backend != "both" else ["numba", "numpy"]
    modes = [args.mode] if args.mode != "both" else ["asym", "dense"]
    rows, gate = _run_bench(modes, backends, args.size, args.channels, args.reps,
                            corrupt=args.corrupt)
    if not gate:
        print("error: asymmetric and dense outputs diverge on the interior; "
              "benchmark aborted", file=sys.stderr)
        return EXIT_DATA
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["mode", "backend", "size", "channels", "reps", "median_ms",
                "weights", "pairs", "weight_ratio_vs_dense"])
    for r in rows:
        w.writerow(r)
    atomic_write(args.out, buf.getvalue())
    write_manifest("bench", args, [args.out], started)
    print(buf.getvalue().rstrip())
    return EXIT_OK


def _run_bench(modes, backends, size, channels, reps, corrupt=False):
    from sparseloc.bench import bench_grid

    return bench_grid(modes, backends, size, channels, reps, corrupt=corrupt)


def cmd_selftest(args):
    from sparseloc.selftest import run_selftest

    ok = run_selftest(corrupt_backward=args.corrupt_backward)
    return EXIT_OK if ok else 1


def build_parser() -> _Parser:
    p = _Parser(prog="sparseloc", description=__doc__)
    p.add_argument("--version", action="version", version=sparseloc.__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("init", help="write fresh random weights and a config")
    sp.add_argument("--preset", default="desk", choices=("desk", "full"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config-out", required=True)
    sp.set_defaults(fn=cmd_init)

    sp = sub.add_parser("extract", help="descriptors for .bin submaps")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--input", required=True, help="one .bin file or a directory")
    sp.add_argument("--out", required=True, help="output JSONL")
    sp.add_argument("--dump-attention", default=None, metavar="DIR")
    sp.set_defaults(fn=cmd_extract)

    sp = sub.add_parser("index", help="build a descriptor database")
    sp.add_argument("--descriptors", required=True)
    sp.add_argument("--catalog", required=True)
    sp.add_argument("--db", required=True)
    sp.set_defaults(fn=cmd_index)

    sp = sub.add_parser("query", help="rank database entries for query descriptors")
    sp.add_argument("--db", required=True)
    sp.add_argument("--descriptors", required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_query)

    sp = sub.add_parser("eval", help="localization metrics for query descriptors")
    sp.add_argument("--db", required=True)
    sp.add_argument("--descriptors", required=True)
    sp.add_argument("--catalog", required=True, help="catalog with query positions")
    sp.add_argument("--radius", type=float, default=25.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("pairs", help="mine positive/negative pairs from a catalog")
    sp.add_argument("--catalog", required=True)
    sp.add_argument("--pos", type=float, default=10.0)
    sp.add_argument("--neg", type=float, default=50.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_pairs)

    sp = sub.add_parser("gen-world", help="materialize a synthetic world")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--places", type=int, default=40)
    sp.add_argument("--spacing", type=float, default=30.0)
    sp.add_argument("--passes", type=int, default=2)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=cmd_gen_world)

    sp = sub.add_parser("train", help="toy metric training on a synthetic world")
    sp.add_argument("--preset", default="desk", choices=("desk", "full"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--places", type=int, default=40)
    sp.add_argument("--spacing", type=float, default=30.0)
    sp.add_argument("--passes", type=int, default=3)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--margin", type=float, default=0.2)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config-out", required=True)
    sp.add_argument("--log", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("ablate", help="extra-axis x dilation-depth grid")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--places", type=int, default=12)
    sp.add_argument("--spacing", type=float, default=30.0)
    sp.add_argument("--epochs", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("bench", help="axis-factorized vs dense benchmark")
    sp.add_argument("--mode", default="both", choices=("asym", "dense", "both"))
    sp.add_argument("--backend", default=backend.active_backend(),
                    choices=("numba", "numpy", "both"))
    sp.add_argument("--size", type=int, default=16, help="dense cube edge length")
    sp.add_argument("--channels", type=int, default=64)
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--out", required=True)
    sp.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("selftest", help="run the built-in verification suites")
    sp.add_argument("--corrupt-backward", default=None, help=argparse.SUPPRESS)
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except errors.SparselocError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
