"""Edge-stream ingestion, snapshot partitioning, and link-prediction labels.

Timestamped edge lists come in as delimiter-separated text (one edge per
line, configurable column order). Node ids are compacted to a dense range
on ingestion and fixed for the whole run; later snapshots in which a node
has no incident edges simply contribute no messages for it.

All functions are pure over their inputs and take explicit generators, so
identical (file, schema, frequency, seed) reproduce identical outputs.
"""

from __future__ import annotations

import gzip
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyInputError, ParseError

DAY_SECONDS = 86_400
WEEK_SECONDS = 7 * DAY_SECONDS

EDGE_COLUMNS = ("src", "dst", "weight", "timestamp")


@dataclass(frozen=True)
class EdgeSchema:
    """How to read one edge per line: delimiter and column order.

    `columns` lists the meaning of each field in order; `weight` may be
    omitted (defaults to 1.0). delimiter=None splits on any whitespace.
    """

    delimiter: str | None = ","
    columns: tuple[str, ...] = EDGE_COLUMNS
    comment: str = "#"

    def __post_init__(self):
        unknown = set(self.columns) - set(EDGE_COLUMNS)
        if unknown:
            raise ConfigError("schema.columns", f"unknown columns {sorted(unknown)}")
        for required in ("src", "dst", "timestamp"):
            if required not in self.columns:
                raise ConfigError("schema.columns", f"missing required column {required!r}")

    @classmethod
    def parse(cls, text: str) -> "EdgeSchema":
        """Parse 'delim:col,col,...' e.g. ',:src,dst,weight,timestamp' or
        'ws:src,dst,timestamp' (ws = any whitespace)."""
        delim_part, _, cols_part = text.partition(":")
        if not cols_part:
            raise ConfigError("schema", f"expected 'delim:col,col,...' got {text!r}")
        delim = None if delim_part == "ws" else delim_part
        return cls(delimiter=delim, columns=tuple(c.strip() for c in cols_part.split(",")))

    def tag(self) -> str:
        return f"{self.delimiter or 'ws'}:{','.join(self.columns)}"


@dataclass
class TemporalEdgeList:
    """Raw timestamped directed edges after id compaction, sorted by time."""

    src: np.ndarray        # int64, dense ids in [0, node_count)
    dst: np.ndarray        # int64
    weight: np.ndarray     # float64
    timestamp: np.ndarray  # float64 seconds
    node_count: int
    source_fingerprint: str = ""

    def __post_init__(self):
        if not (len(self.src) == len(self.dst) == len(self.weight) == len(self.timestamp)):
            raise ValueError("edge arrays must have equal length")

    def __len__(self) -> int:
        return len(self.src)


@dataclass
class GraphSnapshot:
    """One static graph over the global node universe.

    edge_features columns are (weight, position of the timestamp inside the
    window scaled to [0, 1)). node_features are recomputed per snapshot as
    (1, log1p(cumulative incident degree through this snapshot)).
    """

    index: int
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_features: np.ndarray  # (n_edges, 2)
    node_features: np.ndarray  # (node_count, 2)
    window: tuple[float, float]

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    def n_elements(self) -> int:
        return (self.edge_src.size + self.edge_dst.size
                + self.edge_features.size + self.node_features.size)

    def validate(self) -> None:
        n = self.n_nodes
        if self.n_edges:
            if self.edge_src.min() < 0 or self.edge_src.max() >= n:
                raise ValueError(f"snapshot {self.index}: edge src out of range")
            if self.edge_dst.min() < 0 or self.edge_dst.max() >= n:
                raise ValueError(f"snapshot {self.index}: edge dst out of range")
        if self.edge_features.shape[0] != self.n_edges:
            raise ValueError(f"snapshot {self.index}: edge feature rows != edge count")
        if not np.isfinite(self.edge_features).all() or not np.isfinite(self.node_features).all():
            raise ValueError(f"snapshot {self.index}: non-finite features")
        if self.n_edges:
            tnorm = self.edge_features[:, 1]
            if tnorm.min() < 0.0 or tnorm.max() >= 1.0:
                raise ValueError(f"snapshot {self.index}: edge timestamp outside window")


@dataclass
class DynamicGraph:
    """An ordered sequence of contiguous snapshots over one node universe."""

    snapshots: list[GraphSnapshot]
    period_seconds: float
    node_count: int
    frequency: str = ""
    source_fingerprint: str = ""

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, t: int) -> GraphSnapshot:
        return self.snapshots[t]


@dataclass
class LabelSet:
    """Future-edge positives for step t (edges of snapshot t+1) plus negatives.

    eval_negatives maps each distinct positive source to dst candidates
    sampled without replacement from the node universe, rejecting this
    step's positives (historical edges may appear as negatives).
    """

    step: int
    positives: np.ndarray               # (P, 2) dedup, lexicographically sorted
    train_pos: np.ndarray               # (P_tr, 2)
    val_pos: np.ndarray                 # (P_val, 2)
    eval_negatives: dict[int, np.ndarray] = field(default_factory=dict)
    skip: bool = False

    @property
    def n_positives(self) -> int:
        return 0 if self.skip else self.positives.shape[0]

    def val_view(self) -> "LabelSet":
        """The validation slice, sharing the negative lists."""
        return LabelSet(self.step, self.val_pos, np.empty((0, 2), np.int64),
                        self.val_pos, self.eval_negatives, self.val_pos.size == 0)

    def n_elements(self) -> int:
        neg = sum(v.size for v in self.eval_negatives.values())
        return self.positives.size + self.train_pos.size + self.val_pos.size + neg


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _open_text(path: Path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt")
    return open(path, "r")


def load_edge_list(path, schema: EdgeSchema = EdgeSchema()) -> TemporalEdgeList:
    """Read a delimiter-separated edge file into a compacted, time-sorted list.

    Ids are compacted to dense integers in order of first appearance.
    Missing weight column defaults to 1.0. Raises ParseError with the line
    number on malformed rows and EmptyInputError when no edges are present.
    """
    path = Path(path)
    col_index = {c: i for i, c in enumerate(schema.columns)}
    n_cols = len(schema.columns)
    has_weight = "weight" in col_index

    ids: dict[str, int] = {}
    src_l: list[int] = []
    dst_l: list[int] = []
    w_l: list[float] = []
    t_l: list[float] = []

    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or (schema.comment and line.startswith(schema.comment)):
                continue
            parts = line.split(schema.delimiter)
            if len(parts) != n_cols:
                raise ParseError(
                    f"expected {n_cols} fields, got {len(parts)}: {line!r}", lineno
                )
            try:
                ts = float(parts[col_index["timestamp"]])
                w = float(parts[col_index["weight"]]) if has_weight else 1.0
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not np.isfinite(ts) or ts < 0:
                raise ParseError(f"bad timestamp {ts!r}", lineno)
            s_key = parts[col_index["src"]].strip()
            d_key = parts[col_index["dst"]].strip()
            src_l.append(ids.setdefault(s_key, len(ids)))
            dst_l.append(ids.setdefault(d_key, len(ids)))
            w_l.append(w)
            t_l.append(ts)

    if not src_l:
        raise EmptyInputError(f"no edges found in {path}")

    src = np.asarray(src_l, dtype=np.int64)
    dst = np.asarray(dst_l, dtype=np.int64)
    weight = np.asarray(w_l, dtype=np.float64)
    ts = np.asarray(t_l, dtype=np.float64)
    order = np.argsort(ts, kind="stable")
    return TemporalEdgeList(
        src[order], dst[order], weight[order], ts[order],
        node_count=len(ids),
        source_fingerprint=file_fingerprint(path),
    )


def file_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def edges_from_arrays(src, dst, timestamp, weight=None, node_count=None,
                      fingerprint="inline") -> TemporalEdgeList:
    """Build a TemporalEdgeList from in-memory arrays (tests, synthetic data)."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    timestamp = np.asarray(timestamp, dtype=np.float64)
    if weight is None:
        weight = np.ones(len(src), dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if node_count is None:
        node_count = int(max(src.max(), dst.max())) + 1 if len(src) else 0
    order = np.argsort(timestamp, kind="stable")
    return TemporalEdgeList(src[order], dst[order], weight[order], timestamp[order],
                            node_count=node_count, source_fingerprint=fingerprint)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def period_seconds(frequency: str | int | float) -> float:
    """'daily', 'weekly', or a fixed width in seconds."""
    if isinstance(frequency, str):
        name = frequency.strip().lower()
        if name == "daily":
            return float(DAY_SECONDS)
        if name == "weekly":
            return float(WEEK_SECONDS)
        try:
            value = float(name)
        except ValueError:
            raise ConfigError("frequency", f"unknown frequency {frequency!r}") from None
    else:
        value = float(frequency)
    if value <= 0:
        raise ConfigError("frequency", f"period must be positive, got {value}")
    return value


def partition_snapshots(edges: TemporalEdgeList,
                        frequency: str | int | float) -> DynamicGraph:
    """Assign each edge to the window floor((t - start) / period).

    Windows are contiguous from the first timestamp; empty windows are kept
    as zero-edge snapshots so window arithmetic stays regular. Per-edge
    features are (weight, (t - window_start) / period).
    """
    period = period_seconds(frequency)
    if len(edges) == 0:
        raise EmptyInputError("cannot partition an empty edge list")

    start = float(edges.timestamp.min())
    bins = np.floor((edges.timestamp - start) / period).astype(np.int64)
    n_snapshots = int(bins.max()) + 1

    # cumulative incident degree through each snapshot, for node features
    cum_degree = np.zeros(edges.node_count, dtype=np.float64)

    snapshots: list[GraphSnapshot] = []
    order = np.argsort(bins, kind="stable")  # edges already time-sorted within bins
    sorted_bins = bins[order]
    boundaries = np.searchsorted(sorted_bins, np.arange(n_snapshots + 1))
    for t in range(n_snapshots):
        lo, hi = boundaries[t], boundaries[t + 1]
        sel = order[lo:hi]
        w_start = start + t * period
        # binning and this division can disagree by one ulp at boundaries
        tnorm = np.clip((edges.timestamp[sel] - w_start) / period,
                        0.0, np.nextafter(1.0, 0.0))
        feats = np.column_stack([edges.weight[sel], tnorm]) if len(sel) else \
            np.zeros((0, 2), dtype=np.float64)
        incident = np.bincount(
            np.concatenate([edges.src[sel], edges.dst[sel]]),
            minlength=edges.node_count,
        )
        cum_degree += incident
        node_feats = np.column_stack([
            np.ones(edges.node_count, dtype=np.float64),
            np.log1p(cum_degree),
        ])
        snap = GraphSnapshot(
            index=t,
            edge_src=edges.src[sel].copy(),
            edge_dst=edges.dst[sel].copy(),
            edge_features=feats,
            node_features=node_feats,
            window=(w_start, w_start + period),
        )
        snap.validate()
        snapshots.append(snap)

    freq_name = frequency if isinstance(frequency, str) else f"{period:g}s"
    return DynamicGraph(snapshots, period, edges.node_count,
                        frequency=str(freq_name),
                        source_fingerprint=edges.source_fingerprint)


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


def build_labels(g: DynamicGraph, t: int, val_fraction: float, k_neg: int,
                 rng: np.random.Generator) -> LabelSet:
    """Labels for predicting snapshot t+1: dedup positives, a random
    train/val split, and per-source negative dst lists.

    Negatives are sampled uniformly without replacement from the node
    universe, rejecting only this step's positives; when the candidate pool
    is smaller than k_neg the list is truncated to the pool.
    """
    if not 0 <= t < len(g) - 1:
        raise ValueError(f"step {t} out of range for {len(g)} snapshots")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction", f"must be in (0, 1), got {val_fraction}")
    if k_neg < 1:
        raise ConfigError("k_neg", f"must be >= 1, got {k_neg}")

    nxt = g[t + 1]
    empty = np.empty((0, 2), dtype=np.int64)
    if nxt.n_edges == 0:
        return LabelSet(t, empty, empty, empty, {}, skip=True)

    pairs = np.stack([nxt.edge_src, nxt.edge_dst], axis=1)
    positives = np.unique(pairs, axis=0)  # dedup multi-edges, sorted

    n_pos = positives.shape[0]
    n_val = int(round(val_fraction * n_pos))
    perm = rng.permutation(n_pos)
    val_pos = positives[np.sort(perm[:n_val])]
    train_pos = positives[np.sort(perm[n_val:])]

    n_nodes = g.node_count
    eval_negatives: dict[int, np.ndarray] = {}
    srcs, src_starts = np.unique(positives[:, 0], return_index=True)
    for i, src in enumerate(srcs):
        hi = src_starts[i + 1] if i + 1 < len(srcs) else n_pos
        pos_dsts = positives[src_starts[i]:hi, 1]
        pool = np.setdiff1d(np.arange(n_nodes, dtype=np.int64), pos_dsts,
                            assume_unique=False)
        k = min(k_neg, pool.size)
        if k == 0:
            eval_negatives[int(src)] = np.empty(0, dtype=np.int64)
        else:
            eval_negatives[int(src)] = rng.choice(pool, size=k, replace=False)
    return LabelSet(t, positives, train_pos, val_pos, eval_negatives)


def sample_training_negatives(labels: LabelSet, n_nodes: int,
                              rng: np.random.Generator,
                              per_positive: int = 1) -> np.ndarray:
    """Fresh uniform negatives (src, dst) for each train positive, rejecting
    this step's positives. Returns an (n, 2) array."""
    pos_keys = labels.positives[:, 0] * n_nodes + labels.positives[:, 1]
    pos_keys = np.sort(pos_keys)
    srcs = np.repeat(labels.train_pos[:, 0], per_positive)
    dsts = rng.integers(0, n_nodes, size=srcs.size)
    for _ in range(100):
        keys = srcs * n_nodes + dsts
        bad = np.searchsorted(pos_keys, keys)
        bad = (bad < pos_keys.size) & (pos_keys[np.minimum(bad, pos_keys.size - 1)] == keys)
        if not bad.any():
            break
        dsts[bad] = rng.integers(0, n_nodes, size=int(bad.sum()))
    return np.stack([srcs, dsts], axis=1)


# ---------------------------------------------------------------------------
# Snapshot cache
# ---------------------------------------------------------------------------

CACHE_FORMAT = "snaplink-snapshots-v1"


def cache_key(source_fingerprint: str, frequency: str | int | float,
              schema: EdgeSchema | None = None) -> str:
    period = period_seconds(frequency)
    raw = f"{source_fingerprint}|{period:g}|{schema.tag() if schema else ''}"
    return hashlib.sha256(raw.encode()).hexdigest()[:20]


def save_snapshot_cache(path, g: DynamicGraph) -> None:
    """Persist a DynamicGraph as a single .npz with a JSON meta entry."""
    meta = {
        "format": CACHE_FORMAT,
        "period_seconds": g.period_seconds,
        "node_count": g.node_count,
        "frequency": g.frequency,
        "source_fingerprint": g.source_fingerprint,
        "n_snapshots": len(g),
        "windows": [list(s.window) for s in g.snapshots],
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), np.uint8)}
    offsets = np.zeros(len(g) + 1, dtype=np.int64)
    for t, s in enumerate(g.snapshots):
        offsets[t + 1] = offsets[t] + s.n_edges
    arrays["offsets"] = offsets
    arrays["src"] = np.concatenate([s.edge_src for s in g.snapshots]) if len(g) else \
        np.zeros(0, np.int64)
    arrays["dst"] = np.concatenate([s.edge_dst for s in g.snapshots])
    arrays["edge_features"] = np.concatenate([s.edge_features for s in g.snapshots])
    arrays["node_features"] = np.stack([s.node_features for s in g.snapshots])
    np.savez_compressed(path, **arrays)


def load_snapshot_cache(path) -> DynamicGraph:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CACHE_FORMAT:
            raise ValueError(f"unsupported cache format {meta.get('format')!r}")
        offsets = data["offsets"]
        src = data["src"]
        dst = data["dst"]
        ef = data["edge_features"]
        nf = data["node_features"]
        snapshots = []
        for t in range(meta["n_snapshots"]):
            lo, hi = offsets[t], offsets[t + 1]
            snapshots.append(GraphSnapshot(
                index=t,
                edge_src=src[lo:hi].copy(),
                edge_dst=dst[lo:hi].copy(),
                edge_features=ef[lo:hi].copy(),
                node_features=nf[t].copy(),
                window=tuple(meta["windows"][t]),
            ))
    return DynamicGraph(snapshots, meta["period_seconds"], meta["node_count"],
                        frequency=meta["frequency"],
                        source_fingerprint=meta["source_fingerprint"])
