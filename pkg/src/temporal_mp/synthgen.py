"""Synthetic transaction multigraphs with planted, temporally bursty laundering motifs.

Every account is active during one window of the horizon. Routine business
relationships produce evenly spaced transactions across the overlap of the two
accounts' windows. Laundering motifs (fan-in, fan-out, cycle, burst) route
money between a centre account and a few intermediary accounts, squeezed into
a short window. The participants' routine business stops a few days before
the burst (a dormant account suddenly reactivated) and nothing follows it.
Routine copies of the same motif shapes, with the same sizes, the same kind of
intermediaries and the same feature distributions but evenly spaced in time,
are planted as licit decoys, so a motif's shape and features alone say little
about its label; its timing says a lot.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import SpecError
from .graph import TransactionGraph

DAY = 86_400
MOTIFS = ("burst", "fan_in", "fan_out", "cycle")
IBM_INTENSITY = 17.92


@dataclass(frozen=True)
class GenSpec:
    num_nodes: int = 2000
    edges_per_node: float = 10.0
    horizon: float = 90 * DAY
    illicit_ratio: float = 0.02
    motif_mix: dict[str, float] = field(default_factory=lambda: {m: 1.0 for m in MOTIFS})
    burst_window: float = 6 * 3600.0
    quiet_days: tuple[float, float] = (2.0, 7.0)
    intensity: float = 1.5
    motif_size: tuple[int, int] = (2, 4)
    decoy_ratio: float = 3.0
    intermediary_share: float = 0.3
    # background business of an intermediary relative to a regular account
    intermediary_activity: float = 0.1
    noise_dims: int = 0
    amount_shift: float = 0.25
    task: str = "edge"
    seed: int = 0

    def __post_init__(self):
        if self.num_nodes < 2:
            raise SpecError("need at least two nodes")
        if not 0 <= self.illicit_ratio < 1:
            raise SpecError(f"illicit_ratio must be in [0, 1), got {self.illicit_ratio}")
        if self.horizon <= self.burst_window or self.burst_window <= 0:
            raise SpecError("horizon must exceed a positive burst window")
        if not 0 <= self.quiet_days[0] <= self.quiet_days[1]:
            raise SpecError(f"quiet_days must satisfy 0 <= lo <= hi, got {self.quiet_days}")
        if self.intensity < 1:
            raise SpecError("parallel-edge intensity must be >= 1")
        if self.edges_per_node <= 0:
            raise SpecError("edges_per_node must be positive")
        lo, hi = self.motif_size
        if not 2 <= lo <= hi:
            raise SpecError(f"motif_size must satisfy 2 <= lo <= hi, got {self.motif_size}")
        if not 0 < self.intermediary_share < 1:
            raise SpecError("intermediary_share must be in (0, 1)")
        if self.intermediary_activity < 0:
            raise SpecError("intermediary_activity must be >= 0")
        if self.noise_dims < 0:
            raise SpecError("noise_dims must be >= 0")
        if self.decoy_ratio < 0:
            raise SpecError("decoy_ratio must be >= 0")
        if any(k not in MOTIFS for k in self.motif_mix) or any(v < 0 for v in self.motif_mix.values()):
            raise SpecError(f"motif_mix keys must be among {MOTIFS} with non-negative weights")
        if self.illicit_ratio > 0 and sum(self.motif_mix.values()) <= 0:
            raise SpecError("positive illicit_ratio with an empty motif mix")
        if self.task not in ("node", "edge"):
            raise SpecError(f"task must be node or edge, got {self.task!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motif_size"] = list(self.motif_size)
        d["quiet_days"] = list(self.quiet_days)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GenSpec:
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        for key in ("motif_size", "quiet_days"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class _Builder:
    spec: GenSpec
    rng: np.random.Generator
    opens: np.ndarray
    closes: np.ndarray
    src: list = field(default_factory=list)
    dst: list = field(default_factory=list)
    ts: list = field(default_factory=list)
    illicit: list = field(default_factory=list)
    kind: list = field(default_factory=list)  # 0 background, 1 routine motif, 2 laundering motif
    cdf: np.ndarray | None = None  # background sampling weights over accounts

    def draw(self) -> int:
        if self.cdf is None:
            return int(self.rng.integers(self.spec.num_nodes))
        return int(np.searchsorted(self.cdf, self.rng.random() * self.cdf[-1], side="right"))

    def k_draw(self) -> int:
        return 1 + int(self.rng.poisson(self.spec.intensity - 1.0))

    def add(self, i: int, j: int, times, flag: int, kind: int) -> None:
        for t in np.atleast_1d(times):
            self.src.append(i)
            self.dst.append(j)
            self.ts.append(float(t))
            self.illicit.append(flag)
            self.kind.append(kind)

    def routine_times(self, i: int, j: int, k: int) -> np.ndarray:
        lo = max(self.opens[i], self.opens[j])
        hi = min(self.closes[i], self.closes[j])
        period = (hi - lo) / k
        start = lo + self.rng.uniform(0, period)
        t = start + period * np.arange(k) + self.rng.normal(0, 0.02 * period, size=k)
        return np.clip(t, lo, hi)

    def directions(self, i: int, j: int, k: int, forward_prob: float = 0.8):
        fwd = self.rng.random(k) < forward_prob
        return [(i, j) if f else (j, i) for f in fwd]

    def partner(self, i: int, min_overlap: float, exclude=()) -> int:
        for _ in range(50):
            j = self.draw()
            if j == i or j in exclude:
                continue
            if self.overlap(i, j) >= min_overlap:
                return j
        while True:
            j = self.draw()
            if j != i and j not in exclude and self.overlap(i, j) > 0:
                return j

    def overlap(self, i, j):
        return np.minimum(self.closes[i], self.closes[j]) - np.maximum(self.opens[i], self.opens[j])

    def partners(self, i: int, candidates: np.ndarray, m: int, min_overlap: float) -> list[int]:
        """``m`` distinct accounts from ``candidates``, preferring ones whose windows overlap ``i``'s."""
        c = self.rng.permutation(candidates[candidates != i])
        overlap = self.overlap(i, c)
        ranked = np.concatenate([c[overlap >= min_overlap], c[(overlap > 0) & (overlap < min_overlap)]])
        return [int(v) for v in ranked[:m]]


def _motif_edges(shape: str, centre: int, spokes: list[int], rng: np.random.Generator) -> list[tuple[int, int]]:
    """Directed node pairs making up one motif."""
    if shape == "fan_in":
        return [(s, centre) for s in spokes]
    if shape == "fan_out":
        return [(centre, s) for s in spokes]
    if shape == "cycle":
        ring = [centre, *spokes]
        return [(ring[a], ring[(a + 1) % len(ring)]) for a in range(len(ring))]
    return [(centre, s) if rng.random() < 0.5 else (s, centre) for s in spokes]


def generate(spec: GenSpec = GenSpec()) -> TransactionGraph:
    """Build a labelled graph for ``spec.task``; deterministic for a given spec."""
    rng = np.random.default_rng(spec.seed)
    n, H = spec.num_nodes, spec.horizon
    # activity windows may overhang either end of the horizon, so openings and
    # closings are spread evenly over it
    length = rng.uniform(0.35, 0.7, size=n) * H
    opens = rng.uniform(-0.8 * length, H - 0.2 * length)
    closes = np.minimum(opens + length, H)
    opens = np.maximum(opens, 0.0)
    b = _Builder(spec, rng, opens, closes)

    target_total = spec.num_nodes * spec.edges_per_node
    target_illicit = spec.illicit_ratio * target_total
    lo, hi = spec.motif_size
    mean_motif_edges = (lo + hi) / 2 * spec.intensity
    n_motifs = int(round(target_illicit / mean_motif_edges)) if target_illicit > 0 else 0
    if n_motifs * (hi + 1) > n:
        raise SpecError(f"{n_motifs} motifs of up to {hi + 1} accounts do not fit in {n} accounts")

    shapes = list(spec.motif_mix)
    weights = np.array([spec.motif_mix[s] for s in shapes], dtype=float)
    weights = weights / weights.sum() if weights.sum() > 0 else weights
    is_inter = np.zeros(n, dtype=bool)
    is_inter[rng.choice(n, size=max(hi, int(round(spec.intermediary_share * n))), replace=False)] = True
    inter = np.flatnonzero(is_inter)
    node_illicit = np.zeros(n, dtype=np.int64)
    used = np.zeros(n, dtype=bool)

    # routine look-alikes: same shapes, sizes and intermediaries, evenly spaced over the accounts' overlap
    regular = np.flatnonzero(~is_inter)
    for _ in range(int(round(spec.decoy_ratio * n_motifs))):
        shape = shapes[int(rng.choice(len(shapes), p=weights))]
        m = int(rng.integers(lo, hi + 1))
        centre = int(rng.choice(regular))
        spokes = b.partners(centre, inter, m, 0.1 * H)
        if not spokes:
            continue
        for i, j in _motif_edges(shape, centre, spokes, rng):
            if b.overlap(i, j) > 0:
                b.add(i, j, b.routine_times(i, j, b.k_draw()), 0, 1)

    # background relationships
    b.cdf = np.cumsum(np.where(is_inter, spec.intermediary_activity, 1.0))
    remaining = target_total - len(b.ts) - round(n_motifs * mean_motif_edges)
    while remaining > 0:
        i = b.draw()
        j = b.partner(i, 0.1 * H)
        k = min(b.k_draw(), int(math.ceil(remaining)))
        times = b.routine_times(i, j, k)
        for (s, d), t in zip(b.directions(i, j, k), times):
            b.add(s, d, t, 0, 0)
        remaining -= k

    # laundering motifs: accounts whose routine business has just wound down
    # wake up after a few quiet days for one short burst. Burst times are
    # stratified over the routine transaction times, so every period has some.
    q = (np.arange(n_motifs) + rng.random(n_motifs)) / max(n_motifs, 1)
    routine = np.sort(np.asarray(b.ts)) if b.ts else np.array([H / 2])
    for u in rng.permutation(np.quantile(routine, q)):
        shape = shapes[int(rng.choice(len(shapes), p=weights))]
        m = int(rng.integers(lo, hi + 1))
        quiet = rng.uniform(spec.quiet_days[0], spec.quiet_days[1]) * DAY
        target = u - spec.burst_window - quiet
        free = np.flatnonzero(~used & ~is_inter & (closes < H))
        if free.size == 0:
            free = np.flatnonzero(~used)
        centre = int(free[np.argmin(np.abs(closes[free] - target))])
        cand = np.flatnonzero(~used & is_inter & (closes < H) & (np.arange(n) != centre))
        if cand.size < m:
            cand = np.flatnonzero(~used & (np.arange(n) != centre))
        if cand.size < m:
            raise SpecError("ran out of accounts for laundering motifs")
        # prefer intermediaries that wound down shortly before the centre did
        gap = closes[centre] - closes[cand]
        rank = np.where(gap >= 0, gap, H + np.abs(gap))
        spokes = [int(v) for v in cand[np.argsort(rank, kind="stable")[:m]]]
        members = [centre, *spokes]
        start = min(closes[members].max() + quiet, H - spec.burst_window)
        end = start + spec.burst_window
        used[members] = True
        node_illicit[members] = 1
        for i, j in _motif_edges(shape, centre, spokes, rng):
            b.add(i, j, np.sort(rng.uniform(start, end, size=b.k_draw())), 1, 2)

    src, dst = np.array(b.src), np.array(b.dst)
    ts = np.round(np.array(b.ts))
    order = np.argsort(ts, kind="stable")
    src, dst, ts = src[order], dst[order], ts[order]
    edge_illicit = np.array(b.illicit, dtype=np.int64)[order]
    kind = np.array(b.kind, dtype=np.int64)[order]

    E = ts.size
    amount = np.exp(rng.normal(7.0 + spec.amount_shift * edge_illicit, 1.0))
    amount = np.round(amount, 2)
    currency = rng.choice(5, size=E, p=[0.5, 0.2, 0.15, 0.1, 0.05]).astype(float)
    fmt = rng.choice(6, size=E, p=[0.3, 0.25, 0.2, 0.1, 0.1, 0.05]).astype(float)
    # account type, number of distinct intermediary counterparties, then noise
    a, c = np.minimum(src, dst), np.maximum(src, dst)
    uniq = np.unique(a * n + c)
    a, c = uniq // n, uniq % n
    ends = np.r_[a, c[a != c]]
    other = np.r_[c, a[a != c]]
    inter_contacts = np.bincount(ends, weights=is_inter[other].astype(float), minlength=n)
    noise = np.round(rng.normal(size=(n, spec.noise_dims)), 6)
    node_features = np.column_stack([is_inter.astype(float), inter_contacts, noise])

    graph = TransactionGraph(
        node_features=node_features,
        src=src, dst=dst,
        edge_features=np.stack([amount, currency, fmt], axis=1),
        timestamps=ts,
        task=spec.task,
        node_labels=node_illicit if spec.task == "node" else None,
        edge_labels=edge_illicit if spec.task == "edge" else None,
        node_ids=tuple(f"acct{i:05d}" for i in range(n)),
        node_feature_names=("intermediary", "intermediary_counterparties")
        + tuple(f"noise{c}" for c in range(spec.noise_dims)),
        edge_feature_names=("amount", "currency", "format"),
    )
    object.__setattr__(graph, "_edge_kind", kind)
    object.__setattr__(graph, "_node_illicit", node_illicit)
    object.__setattr__(graph, "_edge_illicit", edge_illicit)
    return graph


def stats(g: TransactionGraph) -> dict:
    """Counts in the style of a dataset-statistics table."""
    n, E = g.num_nodes, g.num_edges
    P = g.pair_index.num_pairs
    labels = g.labels
    illicit = float(np.mean(labels == 1)) if labels.size else 0.0
    return {
        "nodes": n,
        "edges": E,
        "pairs": P,
        "illicit_ratio": illicit,
        "licit_ratio": 1.0 - illicit if labels.size else 0.0,
        "mean_parallel_edges": E / P if P else 0.0,
        "edges_per_node": E / n if n else 0.0,
        "task": g.task,
    }


def burst_and_licit_gaps(g: TransactionGraph) -> tuple[np.ndarray, np.ndarray]:
    """Inter-transaction gaps: inside each laundering burst, and within each licit pair."""
    kind = getattr(g, "_edge_kind", None)
    if kind is None:
        raise ValueError("graph was not produced by generate()")
    pi = g.pair_index
    burst_gaps, licit_gaps = [], []
    for p in range(pi.num_pairs):
        e = pi.edges_of(p)
        if e.size < 2:
            continue
        gaps = np.diff(np.sort(g.timestamps[e]))
        (burst_gaps if kind[e[0]] == 2 else licit_gaps).append(gaps)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)  # noqa: E731
    return cat(burst_gaps), cat(licit_gaps)


def spec_manifest(spec: GenSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
