"""Descriptor database, exact top-k search, and the localization protocol.

The database is an append-only set of (id, easting, northing, descriptor)
records with exhaustive Euclidean search; queries rank every entry, breaking
distance ties by id. Persistence is JSON Lines with 17-significant-digit
floats so descriptors round-trip losslessly.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from sparseloc.errors import DuplicateId, EmptyDb


@dataclass(frozen=True)
class DbEntry:
    id: str
    easting: float
    northing: float
    descriptor: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.descriptor, dtype=np.float64).ravel()
        if not np.all(np.isfinite(d)):
            raise ValueError(f"descriptor for {self.id!r} is not finite")
        object.__setattr__(self, "descriptor", d)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


class DescriptorDB:
    """In-memory descriptor index with JSONL persistence."""

    def __init__(self):
        self._entries: dict[str, DbEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._entries

    def entries(self):
        return list(self._entries.values())

    def get(self, entry_id: str) -> DbEntry:
        return self._entries[entry_id]

    def add(self, entry: DbEntry) -> None:
        if entry.id in self._entries:
            raise DuplicateId(f"id {entry.id!r} already present")
        self._entries[entry.id] = entry

    def query(self, q: np.ndarray, k: int):
        """k nearest entries as (id, distance), ties broken by id."""
        if not self._entries:
            raise EmptyDb("cannot query an empty database")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(q, dtype=np.float64).ravel()
        ranked = sorted(
            (math.dist(e.descriptor, q), e.id) for e in self._entries.values()
        )
        return [(eid, dist) for dist, eid in ranked[:k]]

    def save(self, path_or_file) -> None:
        fh = path_or_file if hasattr(path_or_file, "write") else \
            open(path_or_file, "w", encoding="utf-8")
        try:
            for e in sorted(self._entries.values(), key=lambda e: e.id):
                desc = "[" + ", ".join(_fmt(v) for v in e.descriptor) + "]"
                fh.write(
                    f'{{"id": {json.dumps(e.id)}, "easting": {_fmt(e.easting)}, '
                    f'"northing": {_fmt(e.northing)}, "descriptor": {desc}}}\n'
                )
        finally:
            if fh is not path_or_file:
                fh.close()

    @classmethod
    def load(cls, path_or_file) -> "DescriptorDB":
        db = cls()
        fh = path_or_file if hasattr(path_or_file, "read") else \
            open(path_or_file, encoding="utf-8")
        try:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                db.add(DbEntry(rec["id"], float(rec["easting"]),
                               float(rec["northing"]), rec["descriptor"]))
        finally:
            if fh is not path_or_file:
                fh.close()
        return db


def db_add(db: DescriptorDB, entry: DbEntry) -> DescriptorDB:
    db.add(entry)
    return db


def db_query(db: DescriptorDB, q: np.ndarray, k: int):
    return db.query(q, k)


@dataclass
class EvalReport:
    ar_at_1: float  # percent
    ar_at_1pct: float  # percent
    nearest_distances: list = field(default_factory=list)
    query_count: int = 0
    excluded: int = 0  # queries with no true positive within the radius

    def round_trip(self):
        return round(self.ar_at_1, 2), round(self.ar_at_1pct, 2)


def evaluate(queries, db: DescriptorDB, radius: float = 25.0) -> EvalReport:
    """Localization recall over (descriptor, easting, northing) queries.

    recall@1 counts queries whose nearest descriptor lies within `radius`
    meters of the query position; recall@1% does the same for the top
    ceil(|db|/100) results. Queries without any in-radius entry are excluded
    from the denominator and counted separately.
    """
    if len(db) == 0:
        raise EmptyDb("cannot evaluate against an empty database")
    entries = db.entries()
    pos = {e.id: (e.easting, e.northing) for e in entries}
    k_pct = math.ceil(len(db) / 100)
    hits1 = hits_pct = counted = excluded = 0
    nearest = []
    for desc, easting, northing in queries:
        def ground_dist(eid):
            pe, pn = pos[eid]
            return math.hypot(pe - easting, pn - northing)

        if not any(ground_dist(e.id) <= radius for e in entries):
            excluded += 1
            continue
        ranked = db.query(desc, max(k_pct, 1))
        nearest.append(ranked[0][1])
        counted += 1
        if ground_dist(ranked[0][0]) <= radius:
            hits1 += 1
        if any(ground_dist(eid) <= radius for eid, _ in ranked[:k_pct]):
            hits_pct += 1
    if counted == 0:
        return EvalReport(0.0, 0.0, nearest, 0, excluded)
    return EvalReport(100.0 * hits1 / counted, 100.0 * hits_pct / counted,
                      nearest, counted, excluded)


def mine_pairs(catalog, pos_radius: float = 10.0, neg_radius: float = 50.0):
    """Split id pairs by ground distance: positives < pos_radius, negatives
    > neg_radius; pairs in between belong to neither set.

    `catalog` rows are (id, easting, northing). Both sets hold (a, b) tuples
    with a < b.
    """
    rows = [(str(i), float(e), float(n)) for i, e, n in catalog]
    ids = np.array([r[0] for r in rows])
    xy = np.array([[r[1], r[2]] for r in rows])
    diff = xy[:, None, :] - xy[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    iu, ju = np.triu_indices(len(rows), k=1)
    positives, negatives = [], []
    for a, b in zip(iu, ju):
        pair = tuple(sorted((ids[a], ids[b])))
        if dist[a, b] < pos_radius:
            positives.append(pair)
        elif dist[a, b] > neg_radius:
            negatives.append(pair)
    return sorted(positives), sorted(negatives)
