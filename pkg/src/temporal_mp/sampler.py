"""Two-hop neighbourhood sampling (GraphSAGE style) over the undirected view of a multigraph."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError
from .graph import TransactionGraph


@dataclass(frozen=True)
class Fanout:
    hop1: int = 100
    hop2: int = 100

    def __post_init__(self):
        if self.hop1 < 1 or self.hop2 < 1:
            raise ContractError(f"fanouts must be >= 1, got {self.hop1}/{self.hop2}")

    @classmethod
    def parse(cls, text: str) -> Fanout:
        a, _, b = text.partition("/")
        return cls(int(a), int(b or a))

    def __str__(self) -> str:
        return f"{self.hop1}/{self.hop2}"


@dataclass(frozen=True, eq=False)
class SampledSubgraph:
    """A sampled neighbourhood in local indices.

    ``nodes[l]`` is the global id of local node ``l``; ``edges[e]`` the global
    id of local edge ``e``. Edges are grouped into local pairs by
    ``pair_of_edge``; ``pair_ends`` gives each pair's oriented endpoints.
    """

    nodes: np.ndarray
    hop: np.ndarray
    edges: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    pair_of_edge: np.ndarray
    pair_ends: np.ndarray
    pairs: np.ndarray
    seeds: np.ndarray
    seed_local: np.ndarray
    task: str

    @property
    def num_nodes(self) -> int:
        return self.nodes.size

    @property
    def num_edges(self) -> int:
        return self.edges.size

    @property
    def num_pairs(self) -> int:
        return self.pairs.size


def _to_generator(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _induce(g: TransactionGraph, nodes: np.ndarray, hop: np.ndarray, pairs: np.ndarray,
            seeds: np.ndarray, task: str) -> SampledSubgraph:
    pi = g.pair_index
    pairs = np.unique(pairs)
    sizes = pi.ptr[pairs + 1] - pi.ptr[pairs]
    # every parallel edge of a retained pair
    starts = np.repeat(pi.ptr[pairs], sizes)
    offs = np.arange(sizes.sum()) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    edges = np.sort(pi.members[starts + offs])

    local = np.full(g.num_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(nodes.size)
    pair_local = np.full(pi.num_pairs, -1, dtype=np.int64)
    pair_local[pairs] = np.arange(pairs.size)
    if task == "node":
        seed_local = local[seeds]
    else:
        edge_local = np.full(g.num_edges, -1, dtype=np.int64)
        edge_local[edges] = np.arange(edges.size)
        seed_local = edge_local[seeds]
    return SampledSubgraph(
        nodes=nodes, hop=hop, edges=edges,
        src=local[g.src[edges]], dst=local[g.dst[edges]],
        pair_of_edge=pair_local[pi.pair_of_edge[edges]],
        pair_ends=local[pi.ends[pairs]].reshape(-1, 2),
        pairs=pairs, seeds=seeds, seed_local=seed_local, task=task,
    )


def sample_two_hop(g: TransactionGraph, seeds: Sequence[int], fanout: Fanout = Fanout(), rng_seed=0,
                   task: str | None = None) -> SampledSubgraph:
    """Sample up to ``fanout.hop1`` neighbours per seed node and ``fanout.hop2`` per hop-1 node.

    Neighbours are drawn uniformly without replacement; when a node has no more
    neighbours than the fanout, all of them are kept and no randomness is used.
    Every parallel edge of each traversed pair is retained. For the edge task,
    ``seeds`` are edge ids and both endpoints of each seed enter hop 0.
    """
    task = task or g.task
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1)
    if seeds.size == 0:
        raise ContractError("seed set is empty")
    limit = g.num_nodes if task == "node" else g.num_edges
    if seeds.min() < 0 or seeds.max() >= limit:
        raise IndexError(f"seed id out of range [0, {limit})")
    rng = _to_generator(rng_seed)
    ptr, nbr, adj_pair = g.adjacency

    if task == "node":
        hop0 = list(dict.fromkeys(seeds.tolist()))
        pairs = [np.zeros(0, dtype=np.int64)]
    else:
        ends = np.stack([g.src[seeds], g.dst[seeds]], axis=1).reshape(-1)
        hop0 = list(dict.fromkeys(ends.tolist()))
        pairs = [g.pair_index.pair_of_edge[seeds]]

    order = list(hop0)
    hop = {v: 0 for v in hop0}
    frontier = np.array(hop0, dtype=np.int64)
    for h, f in ((1, fanout.hop1), (2, fanout.hop2)):
        picked = []
        for v in frontier.tolist():
            lo, hi = ptr[v], ptr[v + 1]
            if hi - lo <= f:
                picked.append(np.arange(lo, hi))
            else:
                picked.append(lo + np.sort(rng.choice(hi - lo, size=f, replace=False)))
        sel = np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)
        pairs.append(adj_pair[sel])
        fresh = [u for u in np.unique(nbr[sel]).tolist() if u not in hop]
        for u in fresh:
            hop[u] = h
        order.extend(fresh)
        frontier = np.array(fresh, dtype=np.int64)

    nodes = np.array(order, dtype=np.int64)
    hops = np.array([hop[v] for v in order], dtype=np.int64)
    return _induce(g, nodes, hops, np.concatenate(pairs), seeds, task)


def full_subgraph(g: TransactionGraph, seeds: Sequence[int] | None = None, task: str | None = None) -> SampledSubgraph:
    """The whole graph as a 'sample' (local ids equal global ids)."""
    task = task or g.task
    if seeds is None:
        seeds = np.arange(g.num_nodes if task == "node" else g.num_edges)
    nodes = np.arange(g.num_nodes)
    return _induce(g, nodes, np.zeros(g.num_nodes, dtype=np.int64), np.arange(g.pair_index.num_pairs),
                   np.asarray(seeds, dtype=np.int64), task)


def batch_seeds(g: TransactionGraph, split_mask: np.ndarray, batch_size: int, rng_seed=0) -> list[np.ndarray]:
    """Shuffle the split's item ids and cut them into batches (the last may be short).

    Passing the same ``np.random.Generator`` on successive epochs advances it,
    so each epoch gets a different permutation.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    ids = np.flatnonzero(np.asarray(split_mask, dtype=bool))
    if ids.size == 0:
        raise ContractError("split mask selects nothing")
    perm = _to_generator(rng_seed).permutation(ids)
    return [perm[i:i + batch_size] for i in range(0, perm.size, batch_size)]


def iter_chunks(ids: np.ndarray, size: int) -> Iterator[np.ndarray]:
    for i in range(0, ids.size, size):
        yield ids[i:i + size]
