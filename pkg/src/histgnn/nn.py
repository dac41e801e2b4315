"""GNN compute core with a hand-rolled reverse pass over a fixed layer menu.

Two block convolutions are supported: GCN (symmetric-normalized sum with an
implicit self loop) and SAGE_MEAN (mean neighbor aggregate plus a separate
self projection). Normalization degrees come from the block's build-time
sampled in-degrees, so logically pruning rows later never changes the
coefficients of the rows that are still computed.

Embedding matrices ("EmbMatrix") are plain C-order 2-d numpy arrays.
Rows injected into a forward pass (values served from a cache) are treated
as gradient leaves: their gradient is reported per node but nothing flows
into their producers. There is no general autodiff here on purpose.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .sampler import LayerBlock, concat_ranges

EmbMatrix = np.ndarray


class LayerKind(enum.Enum):
    GCN = "gcn"
    SAGE_MEAN = "sage_mean"


@dataclass
class LayerParams:
    """weight is the single GCN projection, or the self projection for SAGE."""

    weight: np.ndarray
    bias: np.ndarray
    weight_neigh: np.ndarray | None = None

    def named_arrays(self):
        pairs = [("weight", self.weight), ("bias", self.bias)]
        if self.weight_neigh is not None:
            pairs.append(("weight_neigh", self.weight_neigh))
        return pairs

    def zeros_like(self) -> "LayerParams":
        wn = None if self.weight_neigh is None else np.zeros_like(self.weight_neigh)
        return LayerParams(np.zeros_like(self.weight), np.zeros_like(self.bias), wn)


@dataclass
class Network:
    kind: LayerKind
    layers: list[LayerParams]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def checksum_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(a).tobytes()
            for p in self.layers
            for _, a in p.named_arrays()
        )


def init_network(
    kind: LayerKind, dims: list[int], rng: np.random.Generator, dtype=np.float32
) -> Network:
    """Glorot-uniform weights, zero biases. dims = [in, hidden..., out]."""
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-s, s, size=(fan_in, fan_out)).astype(dtype)
        wn = None
        if kind is LayerKind.SAGE_MEAN:
            wn = rng.uniform(-s, s, size=(fan_in, fan_out)).astype(dtype)
        layers.append(LayerParams(w, np.zeros(fan_out, dtype=dtype), wn))
    return Network(kind, layers)


# ----------------------------------------------------------- single layers


def _row_edges(block: LayerBlock, rows: np.ndarray):
    """Surviving sampled edges of the selected dst rows, grouped by row."""
    adj = block.adj
    start = adj.start[rows]
    cnt = adj.end[rows] - start
    flat = np.repeat(start, cnt) + concat_ranges(cnt)
    row_pos = np.repeat(np.arange(len(rows), dtype=np.int64), cnt)
    return row_pos, adj.col_indices[flat], cnt


def _gcn_matrix(block: LayerBlock, rows: np.ndarray, dtype) -> sp.csr_matrix:
    """Normalized block adjacency over the selected rows, self loops included.

    Entry (i, j) for an edge dst=rows[i] <- src j is
    1/sqrt((dst_deg+1)(src_deg+1)) with build-time sampled degrees.
    """
    row_pos, cols, _ = _row_edges(block, rows)
    deg_d = block.dst_deg
    deg_s = block.src_deg
    w_edge = 1.0 / np.sqrt(
        (deg_d[rows][row_pos] + 1.0) * (deg_s[cols] + 1.0)
    )
    # self entry: a dst row's own src position equals its dst index
    w_self = 1.0 / np.sqrt((deg_d[rows] + 1.0) * (deg_s[rows] + 1.0))
    r = np.concatenate([row_pos, np.arange(len(rows), dtype=np.int64)])
    c = np.concatenate([cols, rows])
    data = np.concatenate([w_edge, w_self]).astype(dtype)
    return sp.csr_matrix((data, (r, c)), shape=(len(rows), block.num_src))


def _mean_matrix(block: LayerBlock, rows: np.ndarray, dtype) -> sp.csr_matrix:
    """Row-stochastic aggregation over surviving edges; empty rows stay zero."""
    row_pos, cols, cnt = _row_edges(block, rows)
    inv = np.zeros(len(rows))
    nz = cnt > 0
    inv[nz] = 1.0 / cnt[nz]
    data = inv[row_pos].astype(dtype)
    return sp.csr_matrix((data, (row_pos, cols)), shape=(len(rows), block.num_src))


@dataclass
class LayerTape:
    rows: np.ndarray
    relu_mask: np.ndarray | None
    a_mat: sp.csr_matrix | None = None  # GCN
    agg: np.ndarray | None = None
    m_mat: sp.csr_matrix | None = None  # SAGE_MEAN
    h_self: np.ndarray | None = None
    m_agg: np.ndarray | None = None


def _layer_forward_ctx(kind, params, block, h_in, rows, activation):
    if h_in.shape[0] != block.num_src:
        raise ValueError(
            f"h_in has {h_in.shape[0]} rows, frontier needs {block.num_src}"
        )
    if kind is LayerKind.GCN:
        a = _gcn_matrix(block, rows, h_in.dtype)
        agg = a @ h_in
        z = agg @ params.weight + params.bias
        tape = LayerTape(rows=rows, relu_mask=None, a_mat=a, agg=agg)
    elif kind is LayerKind.SAGE_MEAN:
        m = _mean_matrix(block, rows, h_in.dtype)
        h_self = h_in[rows]
        m_agg = m @ h_in
        z = h_self @ params.weight + m_agg @ params.weight_neigh + params.bias
        tape = LayerTape(rows=rows, relu_mask=None, m_mat=m, h_self=h_self, m_agg=m_agg)
    else:
        raise ValueError(f"unsupported layer kind {kind}")
    if activation:
        tape.relu_mask = z > 0
        z = np.where(tape.relu_mask, z, z.dtype.type(0))
    return z, tape


def _layer_backward(kind, params, tape: LayerTape, d_out, n_src):
    dz = d_out if tape.relu_mask is None else np.where(tape.relu_mask, d_out, 0)
    db = dz.sum(axis=0)
    if kind is LayerKind.GCN:
        dw = tape.agg.T @ dz
        d_in = tape.a_mat.T @ (dz @ params.weight.T)
        return LayerParams(dw, db, None), d_in
    dw_self = tape.h_self.T @ dz
    dw_neigh = tape.m_agg.T @ dz
    d_in = tape.m_mat.T @ (dz @ params.weight_neigh.T)
    d_in[tape.rows] += dz @ params.weight.T  # rows are unique dst indices
    return LayerParams(dw_self, db, dw_neigh), d_in


def layer_forward(
    kind: LayerKind,
    params: LayerParams,
    block: LayerBlock,
    h_in: EmbMatrix,
    activation: bool = True,
) -> EmbMatrix:
    """One block convolution over every dst row."""
    rows = np.arange(block.num_dst, dtype=np.int64)
    h_out, _ = _layer_forward_ctx(kind, params, block, h_in, rows, activation)
    return h_out


def frontier_positions(block: LayerBlock, ids: np.ndarray) -> np.ndarray:
    """Positions of global ids inside block.src_nodes; raises if any is absent."""
    ids = np.asarray(ids, dtype=np.int64)
    order = np.argsort(block.src_nodes, kind="stable")
    sorted_src = block.src_nodes[order]
    idx = np.searchsorted(sorted_src, ids)
    bad = (idx >= len(sorted_src)) | (
        np.where(idx < len(sorted_src), sorted_src[np.minimum(idx, len(sorted_src) - 1)], -1)
        != ids
    )
    if np.any(bad):
        raise ValueError(f"ids not in the block frontier: {ids[bad][:5].tolist()}")
    return order[idx]


def mixed_layer_forward(
    kind: LayerKind,
    params: LayerParams,
    block: LayerBlock,
    h_in_normal: EmbMatrix,
    cached: tuple[np.ndarray, EmbMatrix],
    activation: bool = True,
) -> EmbMatrix:
    """Block convolution whose input frontier mixes computed and cached rows.

    h_in_normal holds the rows for src_nodes minus cached ids, in frontier
    order; cached = (global ids, their stored vectors). Together they must
    cover the frontier exactly. With no cached rows this is bit-identical to
    layer_forward.
    """
    cached_ids, cached_vals = cached
    cached_ids = np.asarray(cached_ids, dtype=np.int64)
    if len(cached_ids) == 0:
        if h_in_normal.shape[0] != block.num_src:
            raise ValueError("coverage gap: normal rows do not fill the frontier")
        return layer_forward(kind, params, block, h_in_normal, activation)
    if len(np.unique(cached_ids)) != len(cached_ids):
        raise ValueError("duplicate cached ids")
    pos = frontier_positions(block, cached_ids)
    normal_mask = np.ones(block.num_src, dtype=bool)
    normal_mask[pos] = False
    normal_pos = np.flatnonzero(normal_mask)
    if h_in_normal.shape[0] != len(normal_pos):
        raise ValueError(
            f"coverage gap: {h_in_normal.shape[0]} normal rows for "
            f"{len(normal_pos)} uncached frontier slots"
        )
    h = np.empty((block.num_src, h_in_normal.shape[1]), dtype=h_in_normal.dtype)
    h[normal_pos] = h_in_normal
    h[pos] = cached_vals
    return layer_forward(kind, params, block, h, activation)


# ------------------------------------------------------------ whole batch


@dataclass
class BatchTape:
    h_input: np.ndarray
    entries: list[LayerTape]
    h_layers: list[np.ndarray]  # full per-layer outputs, injected rows included

    @property
    def logits(self) -> np.ndarray:
        return self.h_layers[-1]


def forward_pass(
    network: Network,
    blocks: list[LayerBlock],
    h_input: EmbMatrix,
    compute_rows: list[np.ndarray] | None = None,
    injected: list[tuple[np.ndarray, EmbMatrix] | None] | None = None,
) -> BatchTape:
    """Run all blocks; rows absent from compute_rows[l] are left zero unless
    injected[l] overwrites them. ReLU on every layer except the last."""
    if len(blocks) != network.num_layers:
        raise ValueError("block count does not match network depth")
    entries, h_layers = [], []
    h_prev = h_input
    for l, block in enumerate(blocks):
        rows = (
            np.arange(block.num_dst, dtype=np.int64)
            if compute_rows is None or compute_rows[l] is None
            else np.asarray(compute_rows[l], dtype=np.int64)
        )
        h_rows, tape = _layer_forward_ctx(
            network.kind,
            network.layers[l],
            block,
            h_prev,
            rows,
            activation=l < network.num_layers - 1,
        )
        out_dim = network.layers[l].weight.shape[1]
        h_full = np.zeros((block.num_dst, out_dim), dtype=h_rows.dtype)
        h_full[rows] = h_rows
        inj = None if injected is None else injected[l]
        if inj is not None and len(inj[0]):
            inj_rows = np.asarray(inj[0], dtype=np.int64)
            h_full[inj_rows] = inj[1]
        entries.append(tape)
        h_layers.append(h_full)
        h_prev = h_full
    return BatchTape(h_input=h_input, entries=entries, h_layers=h_layers)


def backward(
    network: Network, blocks: list[LayerBlock], tape: BatchTape, d_logits: EmbMatrix
):
    """Reverse pass. Returns (weight grads, per-layer node grads, input grads).

    node_grads[l] is d loss / d h_layers[l] for every dst row of block l,
    injected (leaf) rows included; only computed rows propagate deeper.
    """
    num = network.num_layers
    grads: list[LayerParams | None] = [None] * num
    node_grads: list[np.ndarray | None] = [None] * num
    d_h = d_logits
    for l in reversed(range(num)):
        node_grads[l] = d_h
        entry = tape.entries[l]
        pg, d_prev = _layer_backward(
            network.kind, network.layers[l], entry, d_h[entry.rows], blocks[l].num_src
        )
        grads[l] = pg
        d_h = d_prev
    return grads, node_grads, d_h


# ------------------------------------------------------------------ loss


def cross_entropy(logits: EmbMatrix, labels: np.ndarray):
    """Mean softmax cross entropy via log-sum-exp; 64-bit accumulation.

    Returns (loss, d_logits) with d_logits cast back to the logits dtype.
    """
    labels = np.asarray(labels)
    if logits.shape[0] != len(labels):
        raise ValueError("labels do not match logit rows")
    if len(labels) and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label id out of range")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = float(-logp[np.arange(n), labels].sum() / n)
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, (d / n).astype(logits.dtype)


def node_grad_norms(node_grads: EmbMatrix) -> np.ndarray:
    """Per-row Euclidean norms, accumulated in 64-bit."""
    g = node_grads.astype(np.float64, copy=False)
    return np.sqrt(np.einsum("ij,ij->i", g, g))


# -------------------------------------------------------------- optimizers


def sgd_step(network: Network, grads: list[LayerParams], eta: float) -> None:
    for p, g in zip(network.layers, grads):
        p.weight -= network.dtype.type(eta) * g.weight
        p.bias -= network.dtype.type(eta) * g.bias
        if p.weight_neigh is not None:
            p.weight_neigh -= network.dtype.type(eta) * g.weight_neigh


@dataclass
class AdamState:
    m: list[LayerParams]
    v: list[LayerParams]
    t: int = 0

    @classmethod
    def for_network(cls, network: Network) -> "AdamState":
        return cls(
            m=[p.zeros_like() for p in network.layers],
            v=[p.zeros_like() for p in network.layers],
        )


def adam_step(
    network: Network,
    grads: list[LayerParams],
    state: AdamState,
    eta: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    state.t += 1
    corr1 = 1.0 - beta1 ** state.t
    corr2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(network.layers, grads, state.m, state.v):
        for (_, pa), (_, ga), (_, ma), (_, va) in zip(
            p.named_arrays(), g.named_arrays(), m.named_arrays(), v.named_arrays()
        ):
            ma *= beta1
            ma += (1 - beta1) * ga
            va *= beta2
            va += (1 - beta2) * ga * ga
            pa -= (eta * (ma / corr1) / (np.sqrt(va / corr2) + eps)).astype(pa.dtype)
