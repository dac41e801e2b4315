"""Selective per-layer cache of intermediate node embeddings.

Each hidden layer owns a ring-buffer table. After a batch, the fraction
p_grad of its nodes with the smallest loss-gradient norms is admitted:
uncached members are written at the ring header, already-cached members are
retained as-is, and the remaining (large-gradient) cached members are
invalidated. Lookups reject entries older than t_stale iterations,
invalidating them on the spot; every t_stale iterations the header snaps
back to the region start so new writes recycle the oldest rows. Rows are
never compacted, only invalidated or overwritten in place.

A separate static layer-0 region can pin the raw features of the highest
in-degree nodes; its hits bypass staleness entirely and only save input I/O.

Degenerate settings: p_grad=0 or t_stale=0 never serves a hit inside the
training loop, which reduces it to plain neighbor sampling. p_grad=1 with
t_stale=inf and capacity >= num_nodes caches every computed embedding and
never refreshes or evicts it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COUNTER_NAMES = (
    "hits",
    "misses",
    "admissions",
    "gradient_evictions",
    "staleness_evictions",
    "forced_evictions",
    "staleness_violations",
    "feature_hits",
    "feature_misses",
)


@dataclass(frozen=True)
class CachePolicy:
    """p_grad: admitted fraction per batch (smallest gradient norms first).
    t_stale: max age of a served entry in iterations; math.inf disables aging.
    capacity: rows per layer table; None sizes each table on first use."""

    p_grad: float
    t_stale: float
    capacity: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_grad <= 1.0:
            raise ValueError(f"p_grad must be in [0, 1], got {self.p_grad}")
        if not (self.t_stale >= 0):
            raise ValueError(f"t_stale must be >= 0 or inf, got {self.t_stale}")
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("capacity must be >= 1 when given")


class _LayerCache:
    """One ring-buffer table plus the node-id maps pointing into it."""

    def __init__(self, num_nodes, dim, policy, dtype, min_capacity=64):
        self.num_nodes = num_nodes
        self.dim = dim
        self.policy = policy
        self.dtype = dtype
        self.min_capacity = min_capacity
        self.capacity = 0
        self.header = 0
        self.table = None  # allocated on first admission
        self.row_owner = None
        self.row_of = np.full(num_nodes, -1, dtype=np.int64)
        self.admit_iter = np.zeros(num_nodes, dtype=np.int64)
        self.counters = dict.fromkeys(COUNTER_NAMES, 0)
        self.window_admissions = 0
        self.window_forced = 0

    def _allocate(self, first_batch_admits: int):
        if self.policy.capacity is not None:
            cap = self.policy.capacity
        elif math.isinf(self.policy.t_stale):
            cap = self.num_nodes
        else:
            # twice the expected admissions accumulated over one staleness window
            window = max(1, int(self.policy.t_stale))
            cap = 2 * max(1, first_batch_admits) * window
            cap = int(np.clip(cap, self.min_capacity, max(self.num_nodes, 1)))
        self.capacity = max(1, cap)
        self.table = np.zeros((self.capacity, self.dim), dtype=self.dtype)
        self.row_owner = np.full(self.capacity, -1, dtype=np.int64)

    def _grow(self):
        if self.table is None or self.capacity >= self.num_nodes:
            return
        new_cap = min(self.capacity * 2, max(self.num_nodes, 1))
        table = np.zeros((new_cap, self.dim), dtype=self.dtype)
        table[: self.capacity] = self.table
        owner = np.full(new_cap, -1, dtype=np.int64)
        owner[: self.capacity] = self.row_owner
        self.table, self.row_owner, self.capacity = table, owner, new_cap

    def lookup(self, ids, current_iter):
        rows = self.row_of[ids]
        present = rows >= 0
        if math.isinf(self.policy.t_stale):
            fresh = present
        else:
            age = current_iter - self.admit_iter[ids]
            fresh = present & (age <= self.policy.t_stale)
            expired = present & ~fresh
            if expired.any():
                self.row_owner[rows[expired]] = -1
                self.row_of[ids[expired]] = -1
                self.counters["staleness_evictions"] += int(expired.sum())
        hit_ids = ids[fresh]
        miss_ids = ids[~fresh]
        hit_rows = (
            self.table[rows[fresh]].copy()
            if self.table is not None and fresh.any()
            else np.empty((0, self.dim), dtype=self.dtype)
        )
        if not math.isinf(self.policy.t_stale) and fresh.any():
            worst = int((current_iter - self.admit_iter[hit_ids]).max())
            if worst > self.policy.t_stale:  # guarded invariant, never expected
                self.counters["staleness_violations"] += 1
        self.counters["hits"] += len(hit_ids)
        self.counters["misses"] += len(miss_ids)
        return hit_ids, hit_rows, miss_ids

    def _release(self, nodes):
        rows = self.row_of[nodes]
        live = rows >= 0
        if live.any():
            self.row_owner[rows[live]] = -1
            self.row_of[nodes[live]] = -1
        return int(live.sum())

    def _write(self, nodes, values, current_iter):
        n = len(nodes)
        if n == 0:
            return
        if self.table is None:
            self._allocate(n)
        if n >= self.capacity:
            # only the trailing window of writes survives a full wrap
            nodes, values = nodes[-self.capacity :], values[-self.capacity :]
            self._release(nodes)
            drop = self.row_owner >= 0
            if drop.any():
                survivors = self.row_owner[drop]
                dropped_age = current_iter - self.admit_iter[survivors]
                self._count_overwrites(dropped_age)
                self.row_of[survivors] = -1
                self.row_owner[drop] = -1
            rows = np.arange(len(nodes), dtype=np.int64)
            self.header = int(len(nodes) % self.capacity)
        else:
            self._release(nodes)  # re-admitted nodes move to fresh rows
            rows = (self.header + np.arange(n, dtype=np.int64)) % self.capacity
            old = self.row_owner[rows]
            live = old >= 0
            if live.any():
                old_nodes = old[live]
                self._count_overwrites(current_iter - self.admit_iter[old_nodes])
                self.row_of[old_nodes] = -1
            self.header = int((self.header + n) % self.capacity)
        self.table[rows] = values.astype(self.dtype, copy=False)
        self.row_owner[rows] = nodes
        self.row_of[nodes] = rows
        self.admit_iter[nodes] = current_iter
        self.counters["admissions"] += len(nodes)
        self.window_admissions += len(nodes)

    def _count_overwrites(self, ages):
        """Overwritten entries that could still have served a hit are forced
        evictions. Lookups precede writes inside an iteration, so an entry at
        age >= t_stale at write time has already served its last possible hit;
        recycling it loses nothing and counts as late staleness collection."""
        if math.isinf(self.policy.t_stale):
            forced = len(ages)
        else:
            forced = int((ages < self.policy.t_stale).sum())
        self.counters["forced_evictions"] += forced
        self.window_forced += forced
        self.counters["staleness_evictions"] += len(ages) - forced

    def update(self, batch_nodes, normal_mask, embeddings, grad_norms, current_iter, refresh_retained):
        n = len(batch_nodes)
        k = int(math.floor(self.policy.p_grad * n))
        order = np.lexsort((batch_nodes, grad_norms))  # rank by norm, ties by id
        admit_pos = order[:k]
        admit_mask = np.zeros(n, dtype=bool)
        admit_mask[admit_pos] = True
        # large-gradient members lose their entry
        evict_pos = ~admit_mask & (self.row_of[batch_nodes] >= 0)
        if evict_pos.any():
            self.counters["gradient_evictions"] += self._release(batch_nodes[evict_pos])
        write_pos = admit_pos[normal_mask[admit_pos]]  # keep admit-rank order
        self._write(batch_nodes[write_pos], embeddings[write_pos], current_iter)
        if refresh_retained:
            retained = batch_nodes[admit_mask & ~normal_mask]
            live = retained[self.row_of[retained] >= 0]
            self.admit_iter[live] = current_iter

    def sweep(self):
        if self.window_admissions and self.window_forced > 0.01 * self.window_admissions:
            self._grow()
        self.window_admissions = 0
        self.window_forced = 0
        self.header = 0

    def valid_entries(self) -> int:
        return int((self.row_of >= 0).sum())

    def check_integrity(self):
        live = np.flatnonzero(self.row_of >= 0)
        rows = self.row_of[live]
        assert len(np.unique(rows)) == len(rows), "two nodes share a row"
        if self.row_owner is not None:
            np.testing.assert_array_equal(self.row_owner[rows], live)
            owned = np.flatnonzero(self.row_owner >= 0)
            np.testing.assert_array_equal(self.row_of[self.row_owner[owned]], owned)


class HistCache:
    """Per-layer embedding caches (layers 1..L) plus the layer-0 feature region.

    layer_dims[l-1] is the embedding width of layer l. The feature region is
    sized by feature_rows and filled once by backfill_features; by default
    admitted entries that are retained again do NOT get a fresh timestamp
    (refresh_retained flips that).
    """

    def __init__(
        self,
        num_nodes: int,
        layer_dims: list[int],
        policy: CachePolicy,
        feature_dim: int | None = None,
        feature_rows: int = 0,
        refresh_retained: bool = False,
        dtype=np.float32,
    ):
        self.num_nodes = num_nodes
        self.policy = policy
        self.refresh_retained = refresh_retained
        self.layers = {
            l + 1: _LayerCache(num_nodes, dim, policy, dtype)
            for l, dim in enumerate(layer_dims)
        }
        self.feature_rows = int(feature_rows)
        self.feature_dim = feature_dim
        self.feature_table = None
        self.feature_row_of = np.full(num_nodes, -1, dtype=np.int64)
        self.counters_extra = {"feature_hits": 0, "feature_misses": 0}

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def _layer(self, layer: int) -> _LayerCache:
        if layer not in self.layers:
            raise ValueError(f"no cache table for layer {layer}")
        return self.layers[layer]

    # ------------------------------------------------------------- lookups

    def lookup(self, layer: int, ids, current_iter: int):
        """Returns (hit_ids, hit_rows, miss_ids); expired entries are
        invalidated and reported as misses. Layer 0 consults the static
        feature region and never ages."""
        ids = np.asarray(ids, dtype=np.int64)
        if layer == 0:
            rows = self.feature_row_of[ids]
            ok = rows >= 0
            hit_rows = (
                self.feature_table[rows[ok]].copy()
                if self.feature_table is not None and ok.any()
                else np.empty((0, self.feature_dim or 0))
            )
            self.counters_extra["feature_hits"] += int(ok.sum())
            self.counters_extra["feature_misses"] += int((~ok).sum())
            return ids[ok], hit_rows, ids[~ok]
        return self._layer(layer).lookup(ids, current_iter)

    # ------------------------------------------------------------- updates

    def update_cache(
        self,
        layer: int,
        batch_nodes,
        normal_nodes,
        embeddings,
        grad_norms,
        current_iter: int,
    ) -> None:
        """Admission/eviction for one layer after a finished iteration.

        batch_nodes: every node of the layer that took part (cached+normal);
        normal_nodes: the subset whose embeddings were computed this batch;
        embeddings/grad_norms: rows aligned with batch_nodes.
        """
        batch_nodes = np.asarray(batch_nodes, dtype=np.int64)
        normal_nodes = np.asarray(normal_nodes, dtype=np.int64)
        if len(batch_nodes) == 0:
            return
        if embeddings.shape[0] != len(batch_nodes):
            raise ValueError("embeddings rows must align with batch_nodes")
        if len(grad_norms) != len(batch_nodes):
            raise ValueError("grad_norms must align with batch_nodes")
        marker = np.zeros(self.num_nodes, dtype=bool)
        marker[normal_nodes] = True
        normal_mask = marker[batch_nodes]
        self._layer(layer).update(
            batch_nodes,
            normal_mask,
            embeddings,
            np.asarray(grad_norms, dtype=np.float64),
            current_iter,
            self.refresh_retained,
        )

    def sweep_staleness(self, current_iter: int | None = None) -> None:
        """Snap every ring header back to the region start (and grow tables
        whose forced evictions exceeded 1% of window admissions)."""
        for lc in self.layers.values():
            lc.sweep()

    def end_iteration(self, current_iter: int) -> None:
        """Bookkeeping hook the trainer calls once per finished iteration."""
        t = self.policy.t_stale
        if not math.isinf(t) and t >= 1 and (current_iter + 1) % int(t) == 0:
            self.sweep_staleness(current_iter)

    # ------------------------------------------------------- feature region

    def backfill_features(self, features: np.ndarray, in_degrees: np.ndarray) -> None:
        """Fill the layer-0 region with the highest in-degree nodes' features,
        ordered so the top-degree node occupies the final row. One-shot."""
        if self.feature_rows <= 0:
            return
        if self.feature_table is not None:
            raise ValueError("feature region already backfilled")
        deg = np.asarray(in_degrees)
        k = min(self.feature_rows, len(deg))
        by_deg_desc = np.lexsort((np.arange(len(deg)), -deg))
        chosen = by_deg_desc[:k][::-1]  # ascending degree, max at last row
        self.feature_dim = features.shape[1]
        self.feature_table = features[chosen].copy()
        self.feature_row_of[chosen] = np.arange(k, dtype=np.int64)

    # -------------------------------------------------------------- metrics

    def counters(self) -> dict[str, int]:
        total = dict.fromkeys(COUNTER_NAMES, 0)
        for lc in self.layers.values():
            for k, v in lc.counters.items():
                total[k] += v
        for k, v in self.counters_extra.items():
            total[k] += v
        return total

    def valid_entries(self) -> int:
        return sum(lc.valid_entries() for lc in self.layers.values())

    def check_integrity(self) -> None:
        for lc in self.layers.values():
            lc.check_integrity()
