"""Layered neighbor sampling for mini-batch training.

A batch expands outermost-in: the seed set is the last layer's output
frontier, and each deeper block uniformly samples up to ``fanout`` in-neighbors
per node without replacement. Output nodes of a block are always a prefix of
its input frontier, so every node can see its own previous-layer state.

Sampling never consults the embedding cache; a bounded producer thread can
therefore run ahead of training. Per-batch generators are derived from
(rng_seed, batch_index), which makes the stream independent of scheduling.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .graphs import Csr2Graph

_DONE = object()


@dataclass(frozen=True)
class SamplePlan:
    """fanouts are listed outermost first: fanouts[0] expands the seeds."""

    fanouts: tuple[int, ...]
    batch_size: int
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fanouts", tuple(int(f) for f in self.fanouts))
        if len(self.fanouts) == 0:
            raise ValueError("need at least one fanout")
        if any(f < 1 for f in self.fanouts):
            raise ValueError(f"all fanouts must be >= 1, got {self.fanouts}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LayerBlock:
    """One bipartite sampling block: edges run src (deeper) -> dst (shallower).

    adj is a local-id dual-offset CSR: row i holds the sampled in-neighbors of
    dst_nodes[i] as positions into src_nodes. dst_nodes == src_nodes[:len(dst)].
    dst_deg/src_deg are the build-time sampled in-degrees used for
    normalization; pruning rows later must not change them.
    """

    dst_nodes: np.ndarray
    src_nodes: np.ndarray
    adj: Csr2Graph
    dst_deg: np.ndarray
    src_deg: np.ndarray = field(default=None)

    @property
    def num_dst(self) -> int:
        return len(self.dst_nodes)

    @property
    def num_src(self) -> int:
        return len(self.src_nodes)

    def copy(self) -> "LayerBlock":
        return LayerBlock(
            self.dst_nodes, self.src_nodes, self.adj.copy(), self.dst_deg, self.src_deg
        )


@dataclass
class LayeredSubgraph:
    """layers[0] is the innermost block (layer-0 inputs to layer-1 outputs);
    layers[-1].dst_nodes is exactly the seed array."""

    seeds: np.ndarray
    layers: list[LayerBlock]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_nodes(self) -> np.ndarray:
        """Layer-0 frontier: the nodes whose raw features feed the first block."""
        return self.layers[0].src_nodes

    def copy(self) -> "LayeredSubgraph":
        return LayeredSubgraph(self.seeds, [b.copy() for b in self.layers])


def split_batches(ids, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle ids and cut into batches; the final batch may be smaller."""
    ids = np.asarray(ids, dtype=np.int64)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = rng.permutation(ids)
    return [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]


def batch_rng(rng_seed: int, batch_index: int) -> np.random.Generator:
    """Deterministic per-batch stream; identical regardless of which thread samples."""
    return np.random.default_rng(np.random.SeedSequence((int(rng_seed), int(batch_index))))


def concat_ranges(counts: np.ndarray) -> np.ndarray:
    """[0..c0), [0..c1), ... concatenated."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    ends = np.cumsum(counts)
    return np.arange(total, dtype=np.int64) - np.repeat(ends - counts, counts)


def _sample_in_neighbors(g: Csr2Graph, dst: np.ndarray, fanout: int, rng):
    """Uniform without-replacement pick of min(fanout, deg) in-neighbors per row.

    Returns (counts per dst, flat sampled src globals grouped by dst in order).
    Implemented by keying every candidate edge with a uniform draw and keeping
    the fanout smallest keys per row, which is an unordered uniform subset.
    """
    start = g.start[dst]
    deg = (g.end[dst] - start).astype(np.int64)
    counts = np.minimum(deg, fanout)
    total = int(deg.sum())
    if total == 0:
        return counts, np.empty(0, dtype=np.int64)
    within = concat_ranges(deg)
    cand = np.repeat(start, deg) + within
    keys = rng.random(total)
    row_rep = np.repeat(np.arange(len(dst), dtype=np.int64), deg)
    order = np.lexsort((keys, row_rep))
    keep = concat_ranges(deg) < fanout
    chosen = cand[order][keep]
    return counts, g.col_indices[chosen]


def _build_block(dst, counts, src_flat, num_nodes_global) -> LayerBlock:
    uniq = np.unique(src_flat)
    in_dst = np.zeros(num_nodes_global, dtype=bool)
    in_dst[dst] = True
    new_nodes = uniq[~in_dst[uniq]]
    src_nodes = np.concatenate([dst, new_nodes])
    glob2loc = np.full(num_nodes_global, -1, dtype=np.int64)
    glob2loc[src_nodes] = np.arange(len(src_nodes), dtype=np.int64)
    offsets = np.zeros(len(dst) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    adj = Csr2Graph(
        start=offsets[:-1].copy(),
        end=offsets[1:].copy(),
        col_indices=glob2loc[src_flat],
        num_nodes=len(dst),
    )
    return LayerBlock(
        dst_nodes=dst,
        src_nodes=src_nodes,
        adj=adj,
        dst_deg=counts.astype(np.int64),
        src_deg=None,
    )


def sample_layered(
    g: Csr2Graph, seeds, plan: SamplePlan, rng: np.random.Generator
) -> LayeredSubgraph:
    """Expand seeds through len(plan.fanouts) sampling blocks."""
    seeds = np.asarray(seeds, dtype=np.int64)
    if len(seeds) == 0:
        raise ValueError("empty seed set")
    if len(np.unique(seeds)) != len(seeds):
        raise ValueError("seed ids must be unique")
    if seeds.min() < 0 or seeds.max() >= g.num_nodes:
        raise ValueError("seed id out of range")
    blocks = []
    frontier = seeds
    for fanout in plan.fanouts:
        counts, src_flat = _sample_in_neighbors(g, frontier, fanout, rng)
        block = _build_block(frontier, counts, src_flat, g.num_nodes)
        blocks.append(block)
        frontier = block.src_nodes
    blocks.reverse()
    for i, block in enumerate(blocks):
        if i == 0:
            block.src_deg = np.zeros(block.num_src, dtype=np.int64)
        else:
            block.src_deg = blocks[i - 1].dst_deg
    return LayeredSubgraph(seeds=seeds, layers=blocks)


class SubgraphProducer:
    """Samples batches on a worker thread into a bounded FIFO queue.

    With queue_capacity c, at most c finished subgraphs plus one in-flight
    sample can exist ahead of the consumer; batch b+c+1 is never sampled
    before batch b is consumed. Iteration yields (batch_index, subgraph)
    in submission order. close() stops the worker promptly.
    """

    def __init__(self, graph, batches, plan: SamplePlan, queue_capacity: int = 2):
        if queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        self._graph = graph
        self._batches = list(batches)
        self._plan = plan
        self._queue: queue.Queue = queue.Queue(maxsize=queue_capacity)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._work, daemon=True)
        self._started = False
        self.batches_sampled = 0

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def _work(self):
        for idx, seeds in enumerate(self._batches):
            if self._stop.is_set():
                return
            sub = sample_layered(
                self._graph, seeds, self._plan, batch_rng(self._plan.rng_seed, idx)
            )
            self.batches_sampled += 1
            if not self._put((idx, sub)):
                return
        self._put(_DONE)

    def start(self):
        if not self._started:
            self._started = True
            self._thread.start()

    def __iter__(self):
        self.start()
        while True:
            item = self._queue.get()
            if item is _DONE:
                return
            yield item

    def close(self):
        self._stop.set()
        if self._started:
            while True:  # unblock a producer stuck in put()
                try:
                    self._queue.get_nowait()
                except queue.Empty:
                    break
            self._thread.join(timeout=5.0)

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.close()
