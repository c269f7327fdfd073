"""Edge-aware, time-weighted message passing over transaction multigraphs.

One layer does:

1. (``with_agg`` only) merge the parallel transactions of every node pair into
   one pair embedding (mean) and one effective timestamp (reducer, default max);
2. weight every incoming message of node ``i`` by
   ``alpha = 1 + softmax_over_neighbourhood(recency)``;
3. aggregate the weighted messages (GIN: sum; PNA: mean/max/min/std with
   degree scalers);
4. update node embeddings, then update pair (or edge) embeddings from their
   freshly updated endpoints.

In ``without_agg`` mode each transaction is its own message and carries its
own weight, normalised over all transactions incident to the receiver.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import SegmentIndex, Tensor
from .errors import ConfigError, ContractError, DimensionError, EmptyReductionError
from .graph import TransactionGraph
from .sampler import SampledSubgraph

MODES = ("with_agg", "without_agg")
BACKENDS = ("gin", "pna")
REDUCERS = ("sum", "mean", "min", "max")
ALPHA_TARGETS = ("message", "edge")
PNA_AGGREGATORS = ("mean", "max", "min", "std")
STD_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    node_in: int
    edge_in: int
    layers: int = 2
    hidden: int = 64
    mode: str = "with_agg"
    backend: str = "gin"
    timestamp_reducer: str = "max"
    temporal: bool = True
    task: str = "edge"
    num_classes: int = 2
    tau: float = 5.0
    # seconds mapped onto tau; fit from data (typical neighbourhood time span)
    time_scale: float = 1.0
    alpha_target: str = "message"
    residual: bool = True
    # mean of log(deg + 1) over training nodes, for the PNA scalers
    pna_delta: float = 1.0

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.node_in < 1 or self.edge_in < 1 or self.num_classes < 2:
            raise ConfigError(f"invalid sizes in {self}")
        for name, allowed in (("mode", MODES), ("backend", BACKENDS), ("timestamp_reducer", REDUCERS),
                              ("alpha_target", ALPHA_TARGETS), ("task", ("node", "edge"))):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not (self.tau > 0 and self.time_scale > 0 and self.pna_delta > 0):
            raise ConfigError("tau, time_scale and pna_delta must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **kw) -> ModelConfig:
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ModelParams(dict):
    """Named learnable tensors. Keys ending in ``.W*`` are weight matrices (L2-regularised)."""

    def weight_names(self) -> list[str]:
        return [k for k in self if k.rsplit(".", 1)[-1].startswith("W")]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.numpy() for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> ModelParams:
        return cls({k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h = cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "x_emb.W": (cfg.node_in, h), "x_emb.b": (h,),
        "z_emb.W": (cfg.edge_in, h), "z_emb.b": (h,),
    }
    for l in range(cfg.layers):
        p = f"layer{l}"
        shapes[f"{p}.dir"] = (1, h)
        if cfg.backend == "gin":
            shapes[f"{p}.eps"] = (1, 1)
            node_in = h
        else:
            n_in = len(PNA_AGGREGATORS) * 3 * h
            shapes[f"{p}.pna.W"] = (n_in, h)
            shapes[f"{p}.pna.b"] = (h,)
            node_in = 2 * h
        shapes.update({f"{p}.node.W1": (node_in, h), f"{p}.node.b1": (h,),
                       f"{p}.node.W2": (h, h), f"{p}.node.b2": (h,)})
        shapes.update({f"{p}.edge.W1": (3 * h, h), f"{p}.edge.b1": (h,),
                       f"{p}.edge.W2": (h, h), f"{p}.edge.b2": (h,)})
    head_in = h if cfg.task == "node" else 4 * h
    shapes.update({"head.W1": (head_in, h), "head.b1": (h,), "head.W2": (h, cfg.num_classes),
                   "head.b2": (cfg.num_classes,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, GIN epsilon 0."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b") or leaf == "eps":
            arr = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, W), b)


def mlp(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """Linear -> ReLU -> Linear."""
    h = ad.relu(linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


# ---------------------------------------------------------------------------
# timestamps and temporal weights (plain numpy; timestamps are not learned)
# ---------------------------------------------------------------------------

def _np_reduce(name: str):
    return {"sum": np.sum, "mean": np.mean, "min": np.min, "max": np.max}[name]


def effective_timestamp(timestamps, reducer: str = "max") -> float:
    """Collapse the timestamps of one pair's parallel transactions to one value."""
    if reducer not in REDUCERS:
        raise ConfigError(f"unknown timestamp reducer {reducer!r}")
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size == 0:
        raise EmptyReductionError("pair without transactions")
    return float(_np_reduce(reducer)(ts))


def _segment_reduce_np(values: np.ndarray, seg: SegmentIndex, reducer: str) -> np.ndarray:
    out = np.zeros(seg.num_segments)
    if len(seg) == 0:
        return out
    v = values[seg.order]
    if reducer in ("sum", "mean"):
        out[seg.nonempty] = np.add.reduceat(v, seg.starts)
        if reducer == "mean":
            out[seg.nonempty] /= seg.counts[seg.nonempty]
    else:
        ufunc = np.maximum if reducer == "max" else np.minimum
        out[seg.nonempty] = ufunc.reduceat(v, seg.starts)
    return out


def effective_timestamps(timestamps: np.ndarray, pair_of_edge: np.ndarray, num_pairs: int,
                         reducer: str = "max") -> np.ndarray:
    """Vectorised :func:`effective_timestamp` over every pair."""
    if reducer not in REDUCERS:
        raise ConfigError(f"unknown timestamp reducer {reducer!r}")
    seg = SegmentIndex(pair_of_edge, num_pairs)
    if seg.empty.any():
        raise ContractError("pair group without transactions")
    return _segment_reduce_np(np.asarray(timestamps, dtype=np.float64), seg, reducer)


def temporal_weights(timestamps, scale: float = 1.0) -> np.ndarray:
    """Weights ``1 + softmax(scale * t)`` over one neighbourhood.

    ``scale`` converts seconds into softmax units (the model uses
    ``tau / time_scale``). The maximum is subtracted first, so raw epoch
    seconds do not overflow.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size == 0:
        raise EmptyReductionError("empty neighbourhood")
    e = np.exp((ts - ts.max()) * scale)
    return 1.0 + e / e.sum()


# parallel transactions are scored individually; the normaliser runs over every
# transaction incident to the node, so the formula is the same
temporal_weights_sgmp = temporal_weights


def neighbourhood_weights(times: np.ndarray, seg: SegmentIndex, scale: float) -> np.ndarray:
    """:func:`temporal_weights` applied independently inside every receiver segment."""
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        return np.ones(0)
    tmax = _segment_reduce_np(times, seg, "max")
    e = np.exp((times - tmax[seg.ids]) * scale)
    denom = _segment_reduce_np(e, seg, "sum")
    return 1.0 + e / denom[seg.ids]


def fit_time_scale(g: TransactionGraph, reducer: str = "max", mode: str = "with_agg") -> float:
    """Median span (max - min) of the timestamps a node sees across its neighbourhood.

    Only nodes with at least two messages count. Falls back to 1 second.
    """
    pi = g.pair_index
    if mode == "with_agg":
        t = effective_timestamps(g.timestamps, pi.pair_of_edge, pi.num_pairs, reducer)
        a, b = pi.ends[:, 0], pi.ends[:, 1]
        loop = a == b
        recv = np.concatenate([a, b[~loop]])
        times = np.concatenate([t, t[~loop]])
    else:
        recv = np.concatenate([g.dst, g.src])
        times = np.concatenate([g.timestamps, g.timestamps])
    seg = SegmentIndex(recv, g.num_nodes)
    spans = (_segment_reduce_np(times, seg, "max") - _segment_reduce_np(times, seg, "min"))[seg.counts >= 2]
    spans = spans[spans > 0]
    return float(np.median(spans)) if spans.size else 1.0


def fit_pna_delta(g: TransactionGraph, node_mask: np.ndarray | None = None, mode: str = "with_agg") -> float:
    """Mean of log(deg + 1) over the given nodes (degree = messages received)."""
    if mode == "with_agg":
        deg = g.degree()
    else:
        deg = np.bincount(np.concatenate([g.src, g.dst]), minlength=g.num_nodes)
    deg = deg if node_mask is None else deg[np.asarray(node_mask, bool)]
    val = float(np.mean(np.log(deg + 1.0))) if deg.size else 1.0
    return val if val > 0 else 1.0


# ---------------------------------------------------------------------------
# batch layout
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Batch:
    """Everything one forward pass needs, in the subgraph's local indices.

    Messages are listed once per (receiver, item): ``item`` is a pair index in
    ``with_agg`` mode and an edge index otherwise. ``flag`` is the share of the
    underlying transactions that flow *into* the receiver.
    """

    sub: SampledSubgraph
    x: np.ndarray
    z: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray | None
    mode: str
    receiver: np.ndarray
    sender: np.ndarray
    item: np.ndarray
    flag: np.ndarray
    msg_time: np.ndarray
    seg: SegmentIndex
    pair_seg: SegmentIndex

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def item_ends(self) -> np.ndarray:
        if self.mode == "with_agg":
            return self.sub.pair_ends
        return np.stack([self.sub.src, self.sub.dst], axis=1)


def make_batch(g: TransactionGraph, sub: SampledSubgraph, mode: str = "with_agg", reducer: str = "max") -> Batch:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    ts = g.timestamps[sub.edges]
    src, dst = sub.src, sub.dst
    pair_seg = SegmentIndex(sub.pair_of_edge, sub.num_pairs)
    if mode == "with_agg":
        ends = sub.pair_ends
        a, b = ends[:, 0], ends[:, 1]
        P = sub.num_pairs
        t_pair = _segment_reduce_np(ts, pair_seg, reducer)
        into_a = _segment_reduce_np((dst == a[sub.pair_of_edge]).astype(float), pair_seg, "mean")
        into_b = _segment_reduce_np((dst == b[sub.pair_of_edge]).astype(float), pair_seg, "mean")
        keep = a != b
        receiver = np.concatenate([a, b[keep]])
        sender = np.concatenate([b, a[keep]])
        item = np.concatenate([np.arange(P), np.arange(P)[keep]])
        flag = np.concatenate([into_a, into_b[keep]])
        msg_time = np.concatenate([t_pair, t_pair[keep]])
    else:
        E = sub.num_edges
        keep = src != dst
        receiver = np.concatenate([dst, src[keep]])
        sender = np.concatenate([src, dst[keep]])
        item = np.concatenate([np.arange(E), np.arange(E)[keep]])
        flag = np.concatenate([np.ones(E), np.zeros(int(keep.sum()))])
        msg_time = np.concatenate([ts, ts[keep]])
    labels = None
    if sub.task == "node" and g.task == "node":
        labels = g.node_labels[sub.seeds]
    elif sub.task == "edge" and g.task == "edge":
        labels = g.edge_labels[sub.seeds]
    return Batch(sub=sub, x=g.node_features[sub.nodes], z=g.edge_features[sub.edges], timestamps=ts,
                 labels=labels, mode=mode, receiver=receiver, sender=sender, item=item,
                 flag=flag.reshape(-1, 1), msg_time=msg_time,
                 seg=SegmentIndex(receiver, sub.num_nodes), pair_seg=pair_seg)


def message_alpha(batch: Batch, cfg: ModelConfig) -> np.ndarray:
    """Per-message temporal weight; all ones when temporal weighting is off."""
    if not cfg.temporal:
        return np.ones(batch.receiver.size)
    return neighbourhood_weights(batch.msg_time, batch.seg, cfg.tau / cfg.time_scale)


# ---------------------------------------------------------------------------
# layer pieces
# ---------------------------------------------------------------------------

def embed_inputs(x: np.ndarray, z: np.ndarray, params: ModelParams, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Project raw node and edge features to the hidden width."""
    if x.shape[1] != cfg.node_in or z.shape[1] != cfg.edge_in:
        raise DimensionError(f"features {x.shape[1]}/{z.shape[1]} vs config {cfg.node_in}/{cfg.edge_in}")
    return (linear(Tensor(x), params["x_emb.W"], params["x_emb.b"]),
            linear(Tensor(z), params["z_emb.W"], params["z_emb.b"]))


def merge_parallel_edges(edge_embs: Tensor, pair_of_edge, num_pairs: int | None = None,
                         member_index=None) -> Tensor:
    """Mean of the embeddings of each pair's parallel transactions.

    With ``member_index`` (e.g. global edge ids) the members of a pair are summed
    in ascending member-index order, so any reordering of the rows gives
    bit-identical output. Without it, rows are summed in storage order.
    """
    if member_index is not None:
        if isinstance(pair_of_edge, SegmentIndex):
            num_pairs = pair_of_edge.num_segments
            pair_of_edge = pair_of_edge.ids
        pair = np.asarray(pair_of_edge)
        order = np.lexsort((np.asarray(member_index), pair))
        edge_embs = ad.gather_rows(edge_embs, order)
        pair_of_edge = pair[order]
    out, empty = ad.segment_aggregate(edge_embs, pair_of_edge, num_pairs, "mean")
    if empty.any():
        raise ContractError("pair group without transactions")
    return out


def _messages(x: Tensor, items: Tensor, batch: Batch, alpha: np.ndarray, params: ModelParams,
              cfg: ModelConfig, layer: int) -> Tensor:
    xs = ad.gather_rows(x, batch.sender)
    zs = ad.gather_rows(items, batch.item)
    direction = ad.matmul(Tensor(batch.flag), params[f"layer{layer}.dir"])
    if cfg.alpha_target == "message":
        return ad.row_scale(ad.relu(xs + zs + direction), alpha)
    return ad.relu(xs + ad.row_scale(zs, alpha) + direction)


def aggregate_messages(x: Tensor, items: Tensor, batch: Batch, alpha: np.ndarray, params: ModelParams,
                       cfg: ModelConfig, layer: int) -> Tensor:
    """Weighted neighbourhood aggregation; nodes without messages get a zero vector."""
    if cfg.backend not in BACKENDS:
        raise ConfigError(f"unknown backend {cfg.backend!r}")
    msg = _messages(x, items, batch, alpha, params, cfg, layer)
    if cfg.backend == "gin":
        out, _ = ad.segment_aggregate(msg, batch.seg, kind="sum")
        return out

    seg = batch.seg
    mean, empty = ad.segment_aggregate(msg, seg, kind="mean")
    mx, _ = ad.segment_aggregate(msg, seg, kind="max")
    mn, _ = ad.segment_aggregate(msg, seg, kind="min")
    sq, _ = ad.segment_aggregate(ad.mul(msg, msg), seg, kind="mean")
    var = ad.relu(ad.sub(sq, ad.mul(mean, mean)))
    present = (~empty).astype(float)
    std = ad.row_scale(ad.sqrt(ad.shift(var, STD_EPS)), present)
    aggs = ad.concat([mean, mx, mn, std])
    logd = np.log(seg.counts + 1.0)
    amp = logd / cfg.pna_delta
    att = np.where(empty, 0.0, cfg.pna_delta / np.where(empty, 1.0, logd))
    scaled = ad.concat([aggs, ad.row_scale(aggs, amp), ad.row_scale(aggs, att)])
    proj = linear(scaled, params[f"layer{layer}.pna.W"], params[f"layer{layer}.pna.b"])
    return ad.row_scale(proj, present)


def update_nodes(x: Tensor, m: Tensor, params: ModelParams, cfg: ModelConfig, layer: int) -> Tensor:
    """GIN: MLP((1 + eps) x + m); PNA: MLP([x, m]). Averaged with x when ``residual``."""
    if x.shape != m.shape:
        raise DimensionError(f"node embeddings {x.shape} vs messages {m.shape}")
    p = f"layer{layer}"
    if cfg.backend == "gin":
        h = ad.add(ad.add(x, ad.mul(x, params[f"{p}.eps"])), m)
    else:
        h = ad.concat([x, m])
    out = ad.relu(mlp(h, params, f"{p}.node"))
    if cfg.residual:
        out = ad.scale(ad.add(x, out), 0.5)
    return out


def update_edges(x: Tensor, items: Tensor, ends: np.ndarray, params: ModelParams, layer: int) -> Tensor:
    """MLP over [x_i, x_j, z] for every pair (or edge) oriented as ``ends``."""
    if ends.shape[0] != items.shape[0]:
        raise DimensionError(f"{ends.shape[0]} endpoint rows for {items.shape[0]} items")
    h = ad.concat([ad.gather_rows(x, ends[:, 0]), ad.gather_rows(x, ends[:, 1]), items])
    return mlp(h, params, f"layer{layer}.edge")


@dataclass(eq=False)
class ForwardOutput:
    nodes: Tensor       # final node embeddings
    items: Tensor       # final pair (with_agg) or edge (without_agg) embeddings
    edges0: Tensor      # layer-0 per-edge embeddings
    alpha: np.ndarray   # per-message weights


def forward(batch: Batch, params: ModelParams, cfg: ModelConfig) -> ForwardOutput:
    """Run all layers; every node is updated from the previous layer's state."""
    if batch.mode != cfg.mode:
        raise ConfigError(f"batch built for {batch.mode}, model configured for {cfg.mode}")
    x, z0 = embed_inputs(batch.x, batch.z, params, cfg)
    items = merge_parallel_edges(z0, batch.pair_seg) if cfg.mode == "with_agg" else z0
    alpha = message_alpha(batch, cfg)
    ends = batch.item_ends
    for layer in range(cfg.layers):
        m = aggregate_messages(x, items, batch, alpha, params, cfg, layer)
        x = update_nodes(x, m, params, cfg, layer)
        items = update_edges(x, items, ends, params, layer)
    return ForwardOutput(x, items, z0, alpha)


def predict(out: ForwardOutput, batch: Batch, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Class logits for the batch's seeds.

    Edge task: head over [x_src, x_dst, own layer-0 embedding, final pair/edge
    embedding], so parallel transactions get distinct scores.
    """
    sub = batch.sub
    if sub.task != cfg.task:
        raise ConfigError(f"batch seeds are {sub.task}s but the model predicts {cfg.task}s")
    if cfg.task == "node":
        h = ad.gather_rows(out.nodes, sub.seed_local)
    else:
        e = sub.seed_local
        item_of = sub.pair_of_edge[e] if cfg.mode == "with_agg" else e
        h = ad.concat([ad.gather_rows(out.nodes, sub.src[e]), ad.gather_rows(out.nodes, sub.dst[e]),
                       ad.gather_rows(out.edges0, e), ad.gather_rows(out.items, item_of)])
    return mlp(h, params, "head")


def logits_for(g: TransactionGraph, sub: SampledSubgraph, params: ModelParams, cfg: ModelConfig) -> Tensor:
    batch = make_batch(g, sub, cfg.mode, cfg.timestamp_reducer)
    return predict(forward(batch, params, cfg), batch, params, cfg)
