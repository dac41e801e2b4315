"""Mini-batch training driver.

Wires the layered sampler, the embedding cache, and the block network
together. Each iteration: take a prefetched subgraph, walk it outermost-in
to find which frontier nodes the cache can serve, prune the adjacency rows
of served and unreachable nodes, load raw features only for the surviving
layer-0 frontier (counting bytes against the unpruned baseline), run the
mixed forward/backward, apply SGD, then feed per-node loss-gradient norms
back into the cache's admission rule.

With p_grad=0 and t_stale=0 every lookup misses, nothing is pruned, and the
loop is bit-identical to the plain cache-free reference loop below.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from .cache import CachePolicy, HistCache
from .graphs import Csr2Graph
from .nn import (
    LayerKind,
    Network,
    backward,
    cross_entropy,
    forward_pass,
    init_network,
    layer_forward,
    node_grad_norms,
    sgd_step,
)
from .sampler import (
    LayerBlock,
    LayeredSubgraph,
    SamplePlan,
    SubgraphProducer,
    batch_rng,
    concat_ranges,
    sample_layered,
    split_batches,
)

_NET_TAG = 16807  # seed-sequence entries keeping the rng streams apart
_PERM_TAG = 1000000007


def _network_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _NET_TAG)))


def _perm_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _PERM_TAG, epoch)))


@dataclass(frozen=True)
class TrainConfig:
    fanouts: tuple[int, ...]  # outermost-first, one per layer
    hidden: int = 64
    batch_size: int = 1024
    epochs: int = 1
    eta: float = 0.01
    kind: LayerKind = LayerKind.GCN
    p_grad: float = 0.9
    t_stale: float = 20
    capacity: int | None = None
    feature_rows: int | None = None  # None = num_nodes // 10
    refresh_retained: bool = False
    seed: int = 0
    probe_every: int = 0  # 0 disables the exact-recompute probes
    probe_layer: int = 1
    dtype: type = np.float32

    def __post_init__(self):
        if len(self.fanouts) == 0 or any(f < 1 for f in self.fanouts):
            raise ValueError("fanouts must be a non-empty tuple of positives")
        if self.batch_size < 1 or self.epochs < 1 or self.hidden < 1:
            raise ValueError("batch_size, epochs and hidden must be >= 1")
        if not math.isfinite(self.eta):
            raise ValueError("eta must be finite")


@dataclass
class IterMetrics:
    iteration: int
    epoch: int
    num_seeds: int
    loss: float
    fetched_bytes: int
    baseline_bytes: int
    prune_writes: int
    hits: int
    misses: int
    admissions: int
    gradient_evictions: int
    staleness_evictions: int
    forced_evictions: int
    feature_hits: int
    feature_misses: int
    valid_entries: int
    estimation_error: float  # nan on iterations without a probe


METRIC_FIELDS = [f.name for f in fields(IterMetrics)]


def write_metrics_csv(path, metrics: list[IterMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for m in metrics:
            w.writerow([getattr(m, name) for name in METRIC_FIELDS])


def io_saving(metrics: list[IterMetrics]) -> float:
    """Fraction of baseline feature traffic the run avoided."""
    base = sum(m.baseline_bytes for m in metrics)
    if base == 0:
        return 0.0
    return 1.0 - sum(m.fetched_bytes for m in metrics) / base


def epoch_mean_estimation_error(metrics: list[IterMetrics], epoch: int) -> float:
    vals = [
        m.estimation_error
        for m in metrics
        if m.epoch == epoch and not math.isnan(m.estimation_error)
    ]
    return float(np.mean(vals)) if vals else math.nan


# ------------------------------------------------------ cache-aware pruning


@dataclass
class PrunedBatch:
    """Outcome of the cache walk over one subgraph.

    layer_live[l] holds the local indices of frontier V^(l) that the batch
    actually touches (computed or served), for l in 0..L; compute_rows[b] and
    injected[b] feed forward_pass for block b.
    """

    sub: LayeredSubgraph
    compute_rows: list[np.ndarray]
    injected: list[tuple[np.ndarray, np.ndarray] | None]
    layer_live: list[np.ndarray]


def _surviving_sources(block: LayerBlock, rows: np.ndarray) -> np.ndarray:
    adj = block.adj
    start = adj.start[rows]
    cnt = adj.end[rows] - start
    return adj.col_indices[np.repeat(start, cnt) + concat_ranges(cnt)]


def _mask_positions(num_nodes: int, ids: np.ndarray, subset: np.ndarray) -> np.ndarray:
    marker = np.zeros(num_nodes, dtype=bool)
    marker[subset] = True
    return marker[ids]


def prune_with_cache(
    sub: LayeredSubgraph, cache: HistCache, current_iter: int
) -> PrunedBatch:
    """Walk blocks outermost-in: a frontier node served by its layer's cache
    contributes no adjacency row, so everything reachable only through it
    drops out of the batch. Pruning is done in place on sub's offsets."""
    num_layers = sub.num_layers
    compute_rows: list = [None] * num_layers
    injected: list = [None] * num_layers
    layer_live: list = [None] * (num_layers + 1)
    layer_live[num_layers] = np.arange(len(sub.seeds), dtype=np.int64)
    inj_locals = np.empty(0, dtype=np.int64)
    inj_values = None
    for b in range(num_layers - 1, -1, -1):
        block = sub.layers[b]
        live = layer_live[b + 1]
        if len(inj_locals):
            keep = np.zeros(block.num_dst, dtype=bool)
            keep[live] = True
            keep[inj_locals] = False
            normal = np.flatnonzero(keep)
            injected[b] = (inj_locals, inj_values)
        else:
            keep = np.zeros(block.num_dst, dtype=bool)
            keep[live] = True
            normal = np.flatnonzero(keep)
        compute_rows[b] = normal
        block.adj.prune_many(np.flatnonzero(~keep))
        src_mask = np.zeros(block.num_src, dtype=bool)
        src_mask[normal] = True  # dst is a prefix of src: self rows stay live
        src_mask[_surviving_sources(block, normal)] = True
        need_src = np.flatnonzero(src_mask)
        layer_live[b] = need_src
        if b >= 1:
            glob = block.src_nodes[need_src]
            hit_ids, hit_values, _miss = cache.lookup(b, glob, current_iter)
            if len(hit_ids):
                hmask = _mask_positions(cache.num_nodes, glob, hit_ids)
                inj_locals, inj_values = need_src[hmask], hit_values
            else:
                inj_locals, inj_values = np.empty(0, dtype=np.int64), None
    return PrunedBatch(sub, compute_rows, injected, layer_live)


# --------------------------------------------------------- feature loading


class FeatureSource:
    """In-memory stand-in for the remote feature store; counts traffic."""

    def __init__(self, features: np.ndarray):
        self.features = features
        self.fetched_bytes = 0
        self.fetched_rows = 0

    @property
    def row_bytes(self) -> int:
        return self.features.shape[1] * self.features.dtype.itemsize

    def fetch(self, ids: np.ndarray) -> np.ndarray:
        self.fetched_rows += len(ids)
        self.fetched_bytes += len(ids) * self.row_bytes
        return self.features[ids]


# ------------------------------------------------------------ drift probes


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine; rows where either side has zero norm come back nan."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    out = np.full(len(a), np.nan)
    out[ok] = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    return out


class EmbeddingLog:
    """Snapshots of exact embeddings for a tracked node set, keyed by
    iteration, for measuring how far representations drift over time."""

    def __init__(self):
        self.records: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def record(self, iteration: int, ids: np.ndarray, rows: np.ndarray) -> None:
        self.records[iteration] = (
            np.asarray(ids, dtype=np.int64).copy(),
            np.asarray(rows).copy(),
        )

    def similarity(self, t: int, s: int) -> float:
        """Mean cosine between iteration t and iteration t - s, over nodes
        present in both snapshots; zero rows are excluded."""
        if s < 0 or t - s < 0:
            raise ValueError(f"need 0 <= s <= t, got t={t} s={s}")
        if t not in self.records or t - s not in self.records:
            raise ValueError(f"no snapshot for iterations {t} and {t - s}")
        ids_a, rows_a = self.records[t]
        ids_b, rows_b = self.records[t - s]
        common, ia, ib = np.intersect1d(ids_a, ids_b, return_indices=True)
        if len(common) == 0:
            return math.nan
        cos = cosine_rows(rows_a[ia], rows_b[ib])
        cos = cos[~np.isnan(cos)]
        return float(cos.mean()) if len(cos) else math.nan


# ----------------------------------------------------------------- trainer


def make_batches(train_ids: np.ndarray, cfg: TrainConfig) -> list[np.ndarray]:
    """Seed batches for every epoch, in training order."""
    out = []
    for epoch in range(cfg.epochs):
        out.extend(split_batches(train_ids, cfg.batch_size, _perm_rng(cfg.seed, epoch)))
    return out


class Trainer:
    def __init__(
        self,
        graph: Csr2Graph,
        features: np.ndarray,
        labels: np.ndarray,
        train_ids: np.ndarray,
        cfg: TrainConfig,
        num_classes: int | None = None,
        probe_nodes: np.ndarray | None = None,
    ):
        self.graph = graph
        self.features = features
        self.labels = np.asarray(labels, dtype=np.int64)
        self.train_ids = np.asarray(train_ids, dtype=np.int64)
        self.cfg = cfg
        self.num_classes = int(num_classes or self.labels.max() + 1)
        depth = len(cfg.fanouts)
        dims = [features.shape[1]] + [cfg.hidden] * (depth - 1) + [self.num_classes]
        self.network = init_network(cfg.kind, dims, _network_rng(cfg.seed), cfg.dtype)
        policy = CachePolicy(cfg.p_grad, cfg.t_stale, cfg.capacity)
        feature_rows = (
            graph.num_nodes // 10 if cfg.feature_rows is None else cfg.feature_rows
        )
        self.cache = HistCache(
            graph.num_nodes,
            [cfg.hidden] * (depth - 1),
            policy,
            feature_rows=feature_rows,
            refresh_retained=cfg.refresh_retained,
            dtype=cfg.dtype,
        )
        if feature_rows > 0:
            self.cache.backfill_features(features, graph.in_degrees())
        self.source = FeatureSource(features)
        self.probe_nodes = probe_nodes
        self.embedding_log = EmbeddingLog() if cfg.probe_every > 0 else None
        self.metrics: list[IterMetrics] = []

    # ------------------------------------------------------------ pieces

    def _load_input(self, pruned: PrunedBatch, current_iter: int):
        block0 = pruned.sub.layers[0]
        dim = self.features.shape[1]
        h = np.zeros((block0.num_src, dim), dtype=self.cfg.dtype)
        live0 = pruned.layer_live[0]
        glob = block0.src_nodes[live0]
        hit_ids, hit_values, _miss = self.cache.lookup(0, glob, current_iter)
        if len(hit_ids):
            hmask = _mask_positions(self.cache.num_nodes, glob, hit_ids)
            h[live0[hmask]] = hit_values.astype(self.cfg.dtype)
            fetch_locals = live0[~hmask]
        else:
            fetch_locals = live0
        if len(fetch_locals):
            rows = self.source.fetch(block0.src_nodes[fetch_locals])
            h[fetch_locals] = rows.astype(self.cfg.dtype)
        baseline = block0.num_src * self.source.row_bytes
        return h, baseline

    def _estimation_probe(self, exact_sub: LayeredSubgraph, mixed_tape):
        """Relative error of the mixed-execution logits against an exact
        recompute of the same (unpruned) subgraph at current weights."""
        h_in = self.features[exact_sub.input_nodes].astype(self.cfg.dtype)
        exact = forward_pass(self.network, exact_sub.layers, h_in)
        diff = float(np.linalg.norm(mixed_tape.logits - exact.logits))
        base = float(np.linalg.norm(exact.logits))
        if self.embedding_log is not None and self.probe_nodes is not None:
            li = self.cfg.probe_layer
            if 1 <= li <= exact_sub.num_layers:
                frontier = exact_sub.layers[li - 1].dst_nodes
                present = _mask_positions(self.graph.num_nodes, frontier, self.probe_nodes)
                self._probe_record = (frontier[present], exact.h_layers[li - 1][present])
        return diff / max(base, 1e-30)

    # --------------------------------------------------------- main loop

    def train_iteration(
        self, iteration: int, epoch: int, sub: LayeredSubgraph, probe: bool = False
    ) -> IterMetrics:
        before = self.cache.counters()
        fetched_before = self.source.fetched_bytes
        exact_sub = sub.copy() if probe else None

        pruned = prune_with_cache(sub, self.cache, iteration)
        h_input, baseline_bytes = self._load_input(pruned, iteration)
        tape = forward_pass(
            self.network, sub.layers, h_input, pruned.compute_rows, pruned.injected
        )
        loss, d_logits = cross_entropy(tape.logits, self.labels[sub.seeds])

        est_err = math.nan
        if probe:
            self._probe_record = None
            est_err = self._estimation_probe(exact_sub, tape)
            if self.embedding_log is not None and self._probe_record is not None:
                self.embedding_log.record(iteration, *self._probe_record)

        grads, node_grads, _ = backward(self.network, sub.layers, tape, d_logits)
        sgd_step(self.network, grads, self.cfg.eta)

        for layer in range(1, sub.num_layers):
            live = pruned.layer_live[layer]
            if len(live) == 0:
                continue
            below = sub.layers[layer - 1]
            self.cache.update_cache(
                layer,
                below.dst_nodes[live],
                below.dst_nodes[pruned.compute_rows[layer - 1]],
                tape.h_layers[layer - 1][live],
                node_grad_norms(node_grads[layer - 1])[live],
                iteration,
            )
        self.cache.end_iteration(iteration)

        after = self.cache.counters()
        delta = {k: after[k] - before[k] for k in after}
        return IterMetrics(
            iteration=iteration,
            epoch=epoch,
            num_seeds=len(sub.seeds),
            loss=loss,
            fetched_bytes=self.source.fetched_bytes - fetched_before,
            baseline_bytes=baseline_bytes,
            prune_writes=sum(b.adj.prune_writes for b in sub.layers),
            hits=delta["hits"],
            misses=delta["misses"],
            admissions=delta["admissions"],
            gradient_evictions=delta["gradient_evictions"],
            staleness_evictions=delta["staleness_evictions"],
            forced_evictions=delta["forced_evictions"],
            feature_hits=delta["feature_hits"],
            feature_misses=delta["feature_misses"],
            valid_entries=self.cache.valid_entries(),
            estimation_error=est_err,
        )

    def train(self) -> list[IterMetrics]:
        cfg = self.cfg
        batches = make_batches(self.train_ids, cfg)
        per_epoch = max(1, math.ceil(len(self.train_ids) / cfg.batch_size))
        plan = SamplePlan(cfg.fanouts, cfg.batch_size, cfg.seed)
        with SubgraphProducer(self.graph, batches, plan, queue_capacity=2) as producer:
            for iteration, sub in producer:
                probe = cfg.probe_every > 0 and iteration % cfg.probe_every == 0
                m = self.train_iteration(iteration, iteration // per_epoch, sub, probe)
                self.metrics.append(m)
        return self.metrics


# ------------------------------------------------------ reference baseline


def run_plain_loop(
    graph: Csr2Graph,
    features: np.ndarray,
    labels: np.ndarray,
    train_ids: np.ndarray,
    cfg: TrainConfig,
    num_classes: int | None = None,
    on_step=None,
):
    """Cache-free mini-batch loop sharing the exact rng streams and update
    order of Trainer. Returns (network, per-iteration losses); on_step, if
    given, is called as on_step(iteration, network) after each update."""
    labels = np.asarray(labels, dtype=np.int64)
    train_ids = np.asarray(train_ids, dtype=np.int64)
    ncls = int(num_classes or labels.max() + 1)
    depth = len(cfg.fanouts)
    dims = [features.shape[1]] + [cfg.hidden] * (depth - 1) + [ncls]
    network = init_network(cfg.kind, dims, _network_rng(cfg.seed), cfg.dtype)
    plan = SamplePlan(cfg.fanouts, cfg.batch_size, cfg.seed)
    losses = []
    for idx, seeds in enumerate(make_batches(train_ids, cfg)):
        sub = sample_layered(graph, seeds, plan, batch_rng(cfg.seed, idx))
        h_in = features[sub.input_nodes].astype(cfg.dtype)
        tape = forward_pass(network, sub.layers, h_in)
        loss, d_logits = cross_entropy(tape.logits, labels[seeds])
        grads, _, _ = backward(network, sub.layers, tape, d_logits)
        sgd_step(network, grads, cfg.eta)
        losses.append(loss)
        if on_step is not None:
            on_step(idx, network)
    return network, losses


# -------------------------------------------------------------- inference


def full_graph_blocks(graph: Csr2Graph, num_layers: int) -> list[LayerBlock]:
    """Whole-graph blocks for exact inference; mirrors training normalization,
    where the innermost source frontier carries no sampled in-edges."""
    ids = np.arange(graph.num_nodes, dtype=np.int64)
    deg = graph.in_degrees()
    zero = np.zeros_like(deg)
    return [
        LayerBlock(ids, ids, graph, deg, zero if b == 0 else deg)
        for b in range(num_layers)
    ]


def evaluate(
    network: Network,
    graph: Csr2Graph,
    features: np.ndarray,
    labels: np.ndarray,
    ids: np.ndarray,
) -> float:
    """Exact full-graph accuracy on the given node ids."""
    h = features.astype(network.dtype)
    blocks = full_graph_blocks(graph, network.num_layers)
    for l, block in enumerate(blocks):
        h = layer_forward(
            network.kind,
            network.layers[l],
            block,
            h,
            activation=l < network.num_layers - 1,
        )
    pred = h[ids].argmax(axis=1)
    return float((pred == np.asarray(labels)[ids]).mean())
