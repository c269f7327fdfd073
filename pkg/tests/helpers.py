"""Test fixtures and independent oracles.

The oracles here are written from the definitions with plain loops and share
no code with the package beyond reading parameter arrays.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from temporal_mp.graph import TransactionGraph


# ---------------------------------------------------------------------------
# graphs
# ---------------------------------------------------------------------------

def random_graph(seed: int, n: int = 6, e: int = 10, task: str = "edge", d_x: int = 3, d_z: int = 2,
                 max_k: int = 3, self_loops: bool = False) -> TransactionGraph:
    """Random multigraph with parallel edges and distinct timestamps; every node is touched."""
    rng = np.random.default_rng(seed)
    src, dst = [], []
    # a spanning path keeps everything connected
    perm = rng.permutation(n)
    for a, b in zip(perm[:-1], perm[1:]):
        src.append(int(a)), dst.append(int(b))
    while len(src) < e:
        if rng.random() < 0.5:
            i = rng.integers(len(src))
            reps = min(int(rng.integers(1, max_k)), e - len(src))
            for _ in range(reps):
                flip = rng.random() < 0.3
                src.append(dst[i] if flip else src[i]), dst.append(src[i] if flip else dst[i])
        else:
            a, b = rng.integers(n, size=2)
            if a == b and not self_loops:
                continue
            src.append(int(a)), dst.append(int(b))
    src, dst = np.array(src[:e]), np.array(dst[:e])
    ts = rng.permutation(e) * 1000.0 + rng.uniform(0, 500, size=e)
    labels = rng.integers(0, 2, size=e if task == "edge" else n)
    labels[0] = 1
    labels[1] = 0
    return TransactionGraph(
        node_features=rng.normal(size=(n, d_x)), src=src, dst=dst,
        edge_features=rng.normal(size=(e, d_z)), timestamps=ts, task=task,
        edge_labels=labels if task == "edge" else None,
        node_labels=labels if task == "node" else None,
    )


def permute_edges(g: TransactionGraph, perm: np.ndarray) -> TransactionGraph:
    return TransactionGraph(
        node_features=g.node_features, src=g.src[perm], dst=g.dst[perm], edge_features=g.edge_features[perm],
        timestamps=g.timestamps[perm], task=g.task,
        edge_labels=g.edge_labels[perm] if g.task == "edge" else None,
        node_labels=g.node_labels if g.task == "node" else None,
    )


def relabel_nodes(g: TransactionGraph, new_of_old: np.ndarray) -> TransactionGraph:
    old_of_new = np.argsort(new_of_old)
    return TransactionGraph(
        node_features=g.node_features[old_of_new], src=new_of_old[g.src], dst=new_of_old[g.dst],
        edge_features=g.edge_features, timestamps=g.timestamps, task=g.task,
        edge_labels=g.edge_labels if g.task == "edge" else None,
        node_labels=g.node_labels[old_of_new] if g.task == "node" else None,
    )


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def central_difference(f, arrays: dict[str, np.ndarray], name: str, eps: float = 1e-5) -> np.ndarray:
    """d f / d arrays[name] by central differences; ``f`` takes the dict of arrays."""
    base = arrays[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = {**arrays, name: base.copy()}
        minus = {**arrays, name: base.copy()}
        plus[name][idx] += eps
        minus[name][idx] -= eps
        grad[idx] = (f(plus) - f(minus)) / (2 * eps)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


# ---------------------------------------------------------------------------
# metric oracles (direct counting)
# ---------------------------------------------------------------------------

def oracle_counts(y, p, c):
    tp = sum(1 for a, b in zip(y, p) if a == c and b == c)
    fp = sum(1 for a, b in zip(y, p) if a != c and b == c)
    fn = sum(1 for a, b in zip(y, p) if a == c and b != c)
    return tp, fp, fn


def oracle_f1(y, p, c=1):
    tp, fp, fn = oracle_counts(y, p, c)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def oracle_macro(y, p):
    classes = sorted(set(y) | set(p) | {0, 1})
    return sum(oracle_f1(y, p, c) for c in classes) / len(classes)


def oracle_ap(y, s):
    """Sweep every distinct score as a threshold; precision/recall recounted from scratch each time."""
    pos = sum(y)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(s), reverse=True):
        chosen = [i for i in range(len(s)) if s[i] >= thr]
        tp = sum(y[i] for i in chosen)
        recall = tp / pos
        ap += (recall - prev_recall) * (tp / len(chosen))
        prev_recall = recall
    return ap


def all_binary(n: int):
    return itertools.product((0, 1), repeat=n)


# ---------------------------------------------------------------------------
# reference forward pass (loops over nodes and pairs)
# ---------------------------------------------------------------------------

def _relu(v):
    return np.maximum(v, 0.0)


def _mlp(v, P, prefix):
    return _relu(v @ P[f"{prefix}.W1"] + P[f"{prefix}.b1"]) @ P[f"{prefix}.W2"] + P[f"{prefix}.b2"]


def reference_forward(g: TransactionGraph, P: dict[str, np.ndarray], layers: int, mode: str, backend: str,
                      alpha=None, pna_delta: float = 1.0, residual: bool = True, std_eps: float = 1e-5):
    """Unweighted (alpha = 1) multigraph message passing, written message by message.

    ``alpha`` may map (receiver, item) to a weight; it defaults to 1 everywhere.
    Returns (node embeddings, item embeddings, layer-0 edge embeddings, head logits per edge or node).
    """
    n, E = g.num_nodes, g.num_edges
    x = g.node_features @ P["x_emb.W"] + P["x_emb.b"]
    z0 = g.edge_features @ P["z_emb.W"] + P["z_emb.b"]

    # group parallel edges by unordered pair; orientation = earliest transaction
    groups: dict[tuple[int, int], list[int]] = {}
    for e in range(E):
        key = (min(g.src[e], g.dst[e]), max(g.src[e], g.dst[e]))
        groups.setdefault(key, []).append(e)
    pair_keys = sorted(groups)
    pair_members = [sorted(groups[k], key=lambda e: (g.timestamps[e], e)) for k in pair_keys]
    pair_of_edge = np.empty(E, dtype=int)
    for p, mem in enumerate(pair_members):
        pair_of_edge[mem] = p
    ends = [(int(g.src[m[0]]), int(g.dst[m[0]])) for m in pair_members]

    # message list: (receiver, sender, item, direction flag)
    msgs = []
    if mode == "with_agg":
        items = np.array([np.mean([z0[e] for e in mem], axis=0) for mem in pair_members])
        for p, mem in enumerate(pair_members):
            a, b = ends[p]
            for recv, send in ((a, b), (b, a)):
                into = np.mean([1.0 if g.dst[e] == recv else 0.0 for e in mem])
                msgs.append((recv, send, p, into))
                if a == b:
                    break
        item_ends = ends
    else:
        items = z0.copy()
        for e in range(E):
            msgs.append((int(g.dst[e]), int(g.src[e]), e, 1.0))
            if g.src[e] != g.dst[e]:
                msgs.append((int(g.src[e]), int(g.dst[e]), e, 0.0))
        item_ends = [(int(g.src[e]), int(g.dst[e])) for e in range(E)]

    for l in range(layers):
        pre = f"layer{l}"
        direction = P[f"{pre}.dir"][0]
        inbox = [[] for _ in range(n)]
        for recv, send, it, flag in msgs:
            w = 1.0 if alpha is None else alpha[(recv, it)]
            inbox[recv].append(w * _relu(x[send] + items[it] + flag * direction))
        h = x.shape[1]
        x_new = np.zeros_like(x)
        for i in range(n):
            if backend == "gin":
                m = np.sum(inbox[i], axis=0) if inbox[i] else np.zeros(h)
                upd = (1.0 + P[f"{pre}.eps"][0, 0]) * x[i] + m
            else:
                if inbox[i]:
                    M = np.array(inbox[i])
                    mean, mx, mn = M.mean(axis=0), M.max(axis=0), M.min(axis=0)
                    var = np.maximum((M * M).mean(axis=0) - mean * mean, 0.0)
                    std = np.sqrt(var + std_eps)
                    aggs = np.concatenate([mean, mx, mn, std])
                    logd = math.log(len(inbox[i]) + 1.0)
                    scaled = np.concatenate([aggs, aggs * logd / pna_delta, aggs * pna_delta / logd])
                    m = scaled @ P[f"{pre}.pna.W"] + P[f"{pre}.pna.b"]
                else:
                    m = np.zeros(h)
                upd = np.concatenate([x[i], m])
            out = _relu(_mlp(upd, P, f"{pre}.node"))
            x_new[i] = 0.5 * (x[i] + out) if residual else out
        x = x_new
        items = np.array([_mlp(np.concatenate([x[a], x[b], items[k]]), P, f"{pre}.edge")
                          for k, (a, b) in enumerate(item_ends)])

    if g.task == "node":
        logits = np.array([_mlp(x[i], P, "head") for i in range(n)])
    else:
        logits = []
        for e in range(E):
            it = pair_of_edge[e] if mode == "with_agg" else e
            logits.append(_mlp(np.concatenate([x[g.src[e]], x[g.dst[e]], z0[e], items[it]]), P, "head"))
        logits = np.array(logits)
    return x, items, z0, logits
