"""Transaction multigraph: storage, CSV ingestion, normalisation, temporal splits.

A :class:`TransactionGraph` stores directed, timestamped transactions between
accounts. Parallel transactions between the same two accounts (in either
direction) form a *pair group*; inside a group the ``k`` index runs 1..K in
timestamp order.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, IntegrityError, ParseError

log = logging.getLogger(__name__)

TASKS = ("node", "edge")
MANIFEST_NAME = "dataset.manifest"


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PairIndex:
    """Edges grouped by unordered endpoint pair.

    ``members[ptr[p]:ptr[p+1]]`` are the edge ids of pair ``p`` sorted by k.
    ``ends[p] = (i, j)`` is the (src, dst) of the pair's first transaction,
    which fixes the orientation used when a pair embedding is updated.
    """

    pair_of_edge: np.ndarray
    ptr: np.ndarray
    members: np.ndarray
    ends: np.ndarray

    @property
    def num_pairs(self) -> int:
        return self.ends.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.ptr)

    def edges_of(self, p: int) -> np.ndarray:
        return self.members[self.ptr[p]:self.ptr[p + 1]]


@dataclass(frozen=True, eq=False)
class TransactionGraph:
    """Immutable directed multigraph with node/edge features and timestamps."""

    node_features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_features: np.ndarray
    timestamps: np.ndarray
    task: str = "edge"
    node_labels: np.ndarray | None = None
    edge_labels: np.ndarray | None = None
    k: np.ndarray | None = None
    node_ids: tuple[str, ...] | None = None
    node_feature_names: tuple[str, ...] = ()
    edge_feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        set_ = lambda name, val: object.__setattr__(self, name, val)  # noqa: E731
        set_("node_features", _frozen(np.atleast_2d(self.node_features), np.float64))
        n = self.node_features.shape[0]
        set_("src", _frozen(self.src, np.int64).reshape(-1))
        set_("dst", _frozen(self.dst, np.int64).reshape(-1))
        E = self.src.size
        ef = np.asarray(self.edge_features, dtype=np.float64)
        set_("edge_features", _frozen(ef.reshape(E, -1) if ef.size else ef.reshape(E, 0), np.float64))
        set_("timestamps", _frozen(self.timestamps, np.float64).reshape(-1))

        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.dst.size != E or self.timestamps.size != E or self.edge_features.shape[0] != E:
            raise DimensionError("src, dst, timestamps and edge_features must have one entry per edge")
        if E and (min(self.src.min(), self.dst.min()) < 0 or max(self.src.max(), self.dst.max()) >= n):
            raise IntegrityError(f"edge references a node id outside [0, {n})")
        if not np.isfinite(self.timestamps).all() or (self.timestamps < 0).any():
            raise IntegrityError("timestamps must be finite and non-negative")
        if not np.isfinite(self.node_features).all() or not np.isfinite(self.edge_features).all():
            raise IntegrityError("features must be finite")

        if self.task == "node":
            if self.node_labels is None or self.edge_labels is not None:
                raise IntegrityError("node task needs node labels and no edge labels")
            set_("node_labels", _frozen(self.node_labels, np.int64).reshape(-1))
            if self.node_labels.size != n:
                raise DimensionError("one node label per node required")
        else:
            if self.edge_labels is None or self.node_labels is not None:
                raise IntegrityError("edge task needs edge labels and no node labels")
            set_("edge_labels", _frozen(self.edge_labels, np.int64).reshape(-1))
            if self.edge_labels.size != E:
                raise DimensionError("one edge label per edge required")

        set_("k", _frozen(self._assign_k(self.k), np.int64))
        if self.node_ids is not None:
            ids = tuple(str(x) for x in self.node_ids)
            if len(ids) != n or len(set(ids)) != n:
                raise IntegrityError("node_ids must be unique and one per node")
            set_("node_ids", ids)

    # -- structure ---------------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.src.size

    @property
    def labels(self) -> np.ndarray:
        return self.node_labels if self.task == "node" else self.edge_labels

    @cached_property
    def _pair_key(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.minimum(self.src, self.dst)
        hi = np.maximum(self.src, self.dst)
        keys, inverse = np.unique(lo * max(self.num_nodes, 1) + hi, return_inverse=True)
        return keys, inverse.reshape(-1)

    def _assign_k(self, given) -> np.ndarray:
        keys, pair = self._pair_key
        order = np.lexsort((np.arange(self.num_edges), self.timestamps, pair))
        sizes = np.bincount(pair, minlength=keys.size)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        rank = np.empty(self.num_edges, dtype=np.int64)
        rank[order] = np.arange(self.num_edges) - np.repeat(starts, sizes)
        if given is None:
            return rank + 1
        given = np.asarray(given, dtype=np.int64).reshape(-1)
        if given.size != self.num_edges:
            raise DimensionError("one k per edge required")
        seen: set[tuple[int, int]] = set()
        for p, kk in zip(pair.tolist(), given.tolist()):
            if (p, kk) in seen:
                raise IntegrityError(f"duplicate (i, j, k) with k={kk}")
            seen.add((p, kk))
        for p in range(keys.size):
            ks = np.sort(given[pair == p])
            if not np.array_equal(ks, np.arange(1, ks.size + 1)):
                raise IntegrityError(f"k values for pair {p} are not contiguous 1..K")
        return given

    @cached_property
    def pair_index(self) -> PairIndex:
        keys, pair = self._pair_key
        order = np.lexsort((self.k, pair))
        sizes = np.bincount(pair, minlength=keys.size)
        ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        first = order[ptr[:-1]] if keys.size else np.zeros(0, dtype=np.int64)
        ends = np.stack([self.src[first], self.dst[first]], axis=1) if keys.size else np.zeros((0, 2), np.int64)
        return PairIndex(_frozen(pair, np.int64), _frozen(ptr, np.int64), _frozen(order, np.int64), _frozen(ends, np.int64))

    @cached_property
    def adjacency(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR over undirected neighbours: ``(ptr, neighbour, pair)`` sorted by neighbour."""
        ends = self.pair_index.ends
        pid = np.arange(ends.shape[0])
        loop = ends[:, 0] == ends[:, 1]
        a = np.concatenate([ends[:, 0], ends[~loop, 1]])
        b = np.concatenate([ends[:, 1], ends[~loop, 0]])
        p = np.concatenate([pid, pid[~loop]])
        order = np.lexsort((b, a))
        a, b, p = a[order], b[order], p[order]
        ptr = np.concatenate([[0], np.cumsum(np.bincount(a, minlength=self.num_nodes))]).astype(np.int64)
        return _frozen(ptr, np.int64), _frozen(b, np.int64), _frozen(p, np.int64)

    def degree(self) -> np.ndarray:
        """Number of distinct neighbours per node."""
        return np.diff(self.adjacency[0])

    def with_features(self, node_features: np.ndarray, edge_features: np.ndarray) -> TransactionGraph:
        return replace(self, node_features=node_features, edge_features=edge_features)


def neighbours(g: TransactionGraph, i: int) -> set[int]:
    """Nodes joined to ``i`` by at least one transaction in either direction."""
    if not 0 <= i < g.num_nodes:
        raise IndexError(f"node {i} not in graph of {g.num_nodes} nodes")
    ptr, nbr, _ = g.adjacency
    return set(nbr[ptr[i]:ptr[i + 1]].tolist())


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

@dataclass
class DatasetSchema:
    """Column roles of an edge CSV (and optional node CSV)."""

    task: str = "edge"
    edge_features: tuple[str, ...] = ()
    node_features: tuple[str, ...] = ()
    label_column: str | None = "label"
    node_file: str | None = None
    edge_file: str = "edges.csv"
    log_features: tuple[str, ...] = ()
    extra: dict[str, str] = field(default_factory=dict)

    def to_manifest(self) -> str:
        lines = {
            "task": self.task,
            "edge_file": self.edge_file,
            "node_file": self.node_file or "",
            "edge_features": ",".join(self.edge_features),
            "node_features": ",".join(self.node_features),
            "label_column": self.label_column or "",
            "log_features": ",".join(self.log_features),
            **self.extra,
        }
        return "".join(f"{k}={v}\n" for k, v in lines.items())

    @classmethod
    def from_manifest(cls, text: str) -> DatasetSchema:
        kv = parse_key_values(text)
        split = lambda s: tuple(c for c in s.split(",") if c)  # noqa: E731
        known = {"task", "edge_file", "node_file", "edge_features", "node_features", "label_column", "log_features"}
        return cls(
            task=kv.get("task", "edge"),
            edge_file=kv.get("edge_file", "edges.csv"),
            node_file=kv.get("node_file") or None,
            edge_features=split(kv.get("edge_features", "")),
            node_features=split(kv.get("node_features", "")),
            label_column=kv.get("label_column") or None,
            log_features=split(kv.get("log_features", "")),
            extra={k: v for k, v in kv.items() if k not in known},
        )


def parse_key_values(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw!r}", n)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _number(text: str, what: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"non-numeric {what} {text!r}", line) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite {what} {text!r}", line)
    return v


def load_edge_csv(path, schema: DatasetSchema | None = None) -> TransactionGraph:
    """Read ``src,dst,timestamp,<features...>[,label]`` into a graph.

    External node ids are arbitrary strings, remapped to 0..N-1 in order of
    first appearance (node file first, when the schema names one).
    """
    path = Path(path)
    schema = schema or DatasetSchema()
    ids: dict[str, int] = {}
    node_rows: list[list[float]] = []
    node_labels: list[int] = []

    if schema.node_file:
        node_path = path.parent / schema.node_file
        with open(node_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[0] != "node_id":
                raise ParseError("node file header must start with node_id", 1)
            fcols = [header.index(c) if c in header else -1 for c in schema.node_features]
            if -1 in fcols:
                raise ParseError(f"node file lacks feature columns {schema.node_features}", 1)
            lcol = header.index(schema.label_column) if schema.task == "node" and schema.label_column in header else None
            if schema.task == "node" and lcol is None:
                raise ParseError(f"node task needs label column {schema.label_column!r} in node file", 1)
            for line, row in enumerate(reader, 2):
                if len(row) != len(header):
                    raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
                if row[0] in ids:
                    raise IntegrityError(f"duplicate node id {row[0]!r} at line {line}")
                ids[row[0]] = len(ids)
                node_rows.append([_number(row[c], "feature", line) for c in fcols])
                if lcol is not None:
                    node_labels.append(int(_number(row[lcol], "label", line)))

    src, dst, ts, feats, labels, ks = [], [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["src", "dst", "timestamp"]:
            raise ParseError("edge file header must start with src,dst,timestamp", 1)
        missing = [c for c in schema.edge_features if c not in header]
        if missing:
            raise ParseError(f"edge file lacks feature columns {missing}", 1)
        fcols = [header.index(c) for c in schema.edge_features]
        lcol = header.index(schema.label_column) if schema.label_column in header else None
        if schema.task == "edge" and lcol is None:
            raise ParseError(f"edge task needs label column {schema.label_column!r}", 1)
        kcol = header.index("k") if "k" in header else None
        for line, row in enumerate(reader, 2):
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            ends = []
            for ext in row[:2]:
                if ext not in ids:
                    if schema.node_file:
                        raise IntegrityError(f"line {line}: node {ext!r} missing from node file")
                    ids[ext] = len(ids)
                ends.append(ids[ext])
            src.append(ends[0])
            dst.append(ends[1])
            t = _number(row[2], "timestamp", line)
            if t < 0:
                raise ParseError(f"negative timestamp {row[2]!r}", line)
            ts.append(t)
            feats.append([_number(row[c], "feature", line) for c in fcols])
            if schema.task == "edge":
                labels.append(int(_number(row[lcol], "label", line)))
            if kcol is not None:
                ks.append(int(_number(row[kcol], "k", line)))

    n = len(ids)
    if schema.node_file:
        X = np.array(node_rows, dtype=np.float64).reshape(n, len(schema.node_features))
        node_names = schema.node_features
    else:
        X = np.ones((n, 1))
        node_names = ("bias",)
    return TransactionGraph(
        node_features=X,
        src=np.array(src, dtype=np.int64),
        dst=np.array(dst, dtype=np.int64),
        edge_features=np.array(feats, dtype=np.float64).reshape(len(src), len(schema.edge_features)),
        timestamps=np.array(ts),
        task=schema.task,
        node_labels=np.array(node_labels) if schema.task == "node" else None,
        edge_labels=np.array(labels) if schema.task == "edge" else None,
        k=np.array(ks) if kcol is not None else None,
        node_ids=tuple(ids),
        node_feature_names=tuple(node_names),
        edge_feature_names=tuple(schema.edge_features),
    )


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


def write_dataset(g: TransactionGraph, directory, schema_extra: dict[str, str] | None = None,
                  log_features: Sequence[str] = ()) -> DatasetSchema:
    """Write ``edges.csv``, ``nodes.csv`` and ``dataset.manifest`` for ``g``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = g.node_ids or tuple(str(i) for i in range(g.num_nodes))
    schema = DatasetSchema(
        task=g.task,
        edge_features=g.edge_feature_names or tuple(f"z{c}" for c in range(g.edge_features.shape[1])),
        node_features=g.node_feature_names or tuple(f"x{c}" for c in range(g.node_features.shape[1])),
        node_file="nodes.csv",
        log_features=tuple(log_features),
        extra=dict(schema_extra or {}),
    )
    with open(directory / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", *schema.node_features] + (["label"] if g.task == "node" else []))
        for i in range(g.num_nodes):
            row = [ids[i], *map(_fmt, g.node_features[i])]
            if g.task == "node":
                row.append(str(int(g.node_labels[i])))
            w.writerow(row)
    with open(directory / schema.edge_file, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "timestamp", *schema.edge_features] + (["label"] if g.task == "edge" else []))
        for e in range(g.num_edges):
            row = [ids[g.src[e]], ids[g.dst[e]], _fmt(g.timestamps[e]), *map(_fmt, g.edge_features[e])]
            if g.task == "edge":
                row.append(str(int(g.edge_labels[e])))
            w.writerow(row)
    (directory / MANIFEST_NAME).write_text(schema.to_manifest())
    return schema


def load_dataset(path) -> tuple[TransactionGraph, DatasetSchema]:
    """Load a dataset directory (or its manifest file)."""
    path = Path(path)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    schema = DatasetSchema.from_manifest(manifest.read_text())
    return load_edge_csv(manifest.parent / schema.edge_file, schema), schema


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureStats:
    """Column means/sds of node and edge features, fit on training rows only."""

    node_mean: np.ndarray
    node_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray
    edge_log: np.ndarray  # bool per edge column: log1p before z-scoring

    @property
    def node_constant(self) -> np.ndarray:
        return self.node_std <= 1e-12

    @property
    def edge_constant(self) -> np.ndarray:
        return self.edge_std <= 1e-12

    @classmethod
    def fit(cls, g: TransactionGraph, node_mask=None, edge_mask=None, log_features: Sequence[str] = ()) -> FeatureStats:
        nm = np.ones(g.num_nodes, bool) if node_mask is None else np.asarray(node_mask, bool)
        em = np.ones(g.num_edges, bool) if edge_mask is None else np.asarray(edge_mask, bool)
        logc = np.array([name in log_features for name in g.edge_feature_names] or
                        [False] * g.edge_features.shape[1], dtype=bool)
        Z = _log_cols(g.edge_features[em], logc)
        X = g.node_features[nm]
        return cls(X.mean(axis=0), X.std(axis=0), Z.mean(axis=0), Z.std(axis=0), logc)

    def to_dict(self) -> dict[str, list]:
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("node_mean", "node_std", "edge_mean", "edge_std", "edge_log")}

    @classmethod
    def from_dict(cls, d) -> FeatureStats:
        return cls(*(np.asarray(d[k], dtype=bool if k == "edge_log" else np.float64)
                     for k in ("node_mean", "node_std", "edge_mean", "edge_std", "edge_log")))


def _log_cols(Z: np.ndarray, logc: np.ndarray) -> np.ndarray:
    if not logc.any():
        return Z
    Z = Z.copy()
    Z[:, logc] = np.sign(Z[:, logc]) * np.log1p(np.abs(Z[:, logc]))
    return Z


def _zscore(A: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    const = std <= 1e-12
    out = (A - mean) / np.where(const, 1.0, std)
    out[:, const] = 0.0
    return out


def normalize_features(g: TransactionGraph, stats: FeatureStats) -> TransactionGraph:
    """Z-score node and edge features with training statistics; constant columns become 0.

    Timestamps are left untouched.
    """
    if stats.node_mean.shape[0] != g.node_features.shape[1] or stats.edge_mean.shape[0] != g.edge_features.shape[1]:
        raise DimensionError(
            f"stats for {stats.node_mean.shape[0]}/{stats.edge_mean.shape[0]} columns, "
            f"graph has {g.node_features.shape[1]}/{g.edge_features.shape[1]}")
    X = _zscore(g.node_features, stats.node_mean, stats.node_std)
    Z = _zscore(_log_cols(g.edge_features, stats.edge_log), stats.edge_mean, stats.edge_std)
    return g.with_features(X, Z)


# ---------------------------------------------------------------------------
# temporal split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Splits:
    """Boolean masks over the graph's labelled items (edges or nodes)."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    level: str
    warnings: tuple[str, ...] = ()

    def mask(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise ContractError(f"unknown split {name!r}")
        return getattr(self, name)


def _cut_points(ts_sorted: np.ndarray, fractions: Sequence[float]) -> list[int]:
    n = ts_sorted.size
    cuts, prev = [], 0
    acc = 0.0
    for f in fractions[:-1]:
        acc += f
        c = max(prev, int(round(acc * n)))
        # ties straddling the boundary stay in the earlier split, unless that
        # would swallow every remaining item
        ext = c
        while 0 < ext < n and ts_sorted[ext] == ts_sorted[ext - 1]:
            ext += 1
        if ext < n:
            c = ext
        cuts.append(c)
        prev = c
    return cuts


def temporal_split(g: TransactionGraph, fractions: Sequence[float] = (0.6, 0.2, 0.2)) -> Splits:
    """Split by time: edges sorted by timestamp (stable), cut at quantiles.

    For node tasks each node goes to the split of its latest incident edge;
    isolated nodes are in no split.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ContractError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.argsort(g.timestamps, kind="stable")
    c1, c2 = _cut_points(g.timestamps[order], fractions)
    which = np.empty(g.num_edges, dtype=np.int64)
    which[order[:c1]] = 0
    which[order[c1:c2]] = 1
    which[order[c2:]] = 2

    if g.task == "edge":
        level, labels = "edge", g.edge_labels
    else:
        level, labels = "node", g.node_labels
        latest = np.full(g.num_nodes, -1, dtype=np.int64)
        rank = np.empty(g.num_edges, dtype=np.int64)
        rank[order] = np.arange(g.num_edges)
        for ends in (g.src, g.dst):
            np.maximum.at(latest, ends, rank)
        node_which = np.full(g.num_nodes, -1, dtype=np.int64)
        has = latest >= 0
        node_which[has] = which[order[latest[has]]]
        which = node_which

    masks = [which == s for s in range(3)]
    warnings = tuple(f"{name} split has no positive labels" for name, m in zip(("train", "val", "test"), masks)
                     if not (labels[m] == 1).any())
    for w in warnings:
        log.warning(w)
    return Splits(*masks, level=level, warnings=warnings)
