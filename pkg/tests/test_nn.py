"""Compute-core tests: dense oracles, finite differences, loss identities."""

import numpy as np
import pytest

from histgnn.graphs import CooGraph, Csr2Graph, build_csr2
from histgnn.nn import (
    AdamState,
    LayerKind,
    LayerParams,
    Network,
    adam_step,
    backward,
    cross_entropy,
    forward_pass,
    init_network,
    layer_forward,
    mixed_layer_forward,
    node_grad_norms,
    sgd_step,
)
from histgnn.sampler import LayerBlock, SamplePlan, sample_layered

# ---------------------------------------------------------------- oracles


def dense_gcn(block, h_in, w, b, act):
    a = np.zeros((block.num_dst, block.num_src))
    for i in range(block.num_dst):
        for j in block.adj.neighbors(i).tolist():
            a[i, j] += 1.0 / np.sqrt(
                (block.dst_deg[i] + 1.0) * (block.src_deg[j] + 1.0)
            )
        a[i, i] += 1.0 / np.sqrt((block.dst_deg[i] + 1.0) * (block.src_deg[i] + 1.0))
    z = a @ h_in @ w + b
    return np.maximum(z, 0) if act else z


def dense_sage(block, h_in, w_self, w_neigh, b, act):
    m = np.zeros((block.num_dst, h_in.shape[1]))
    for i in range(block.num_dst):
        nbrs = block.adj.neighbors(i)
        if len(nbrs):
            m[i] = h_in[nbrs].mean(axis=0)
    z = h_in[: block.num_dst] @ w_self + m @ w_neigh + b
    return np.maximum(z, 0) if act else z


def fd_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        lp = f()
        arr[idx] = orig - h
        lm = f()
        arr[idx] = orig
        g[idx] = (lp - lm) / (2 * h)
    return g


def single_block(num_dst, src_extra, edges, dst_deg=None, src_deg=None):
    """Hand-built block: edges is a list of (dst_local, src_local)."""
    n_src = num_dst + src_extra
    counts = np.zeros(num_dst, dtype=np.int64)
    for d, _ in edges:
        counts[d] += 1
    offsets = np.zeros(num_dst + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    cols = np.zeros(len(edges), dtype=np.int64)
    fill = offsets[:-1].copy()
    for d, s in edges:
        cols[fill[d]] = s
        fill[d] += 1
    adj = Csr2Graph(offsets[:-1].copy(), offsets[1:].copy(), cols, num_dst)
    return LayerBlock(
        dst_nodes=np.arange(num_dst, dtype=np.int64),
        src_nodes=np.arange(n_src, dtype=np.int64),
        adj=adj,
        dst_deg=np.asarray(dst_deg if dst_deg is not None else counts, dtype=np.int64),
        src_deg=np.asarray(
            src_deg if src_deg is not None else np.zeros(n_src), dtype=np.int64
        ),
    )


def sampled_instance(seed, kind, dims=(3, 4, 3), n=20, m=60, num_seeds=4):
    rng = np.random.default_rng(seed)
    edges = CooGraph(rng.integers(0, n, m), rng.integers(0, n, m), n)
    g = build_csr2(edges)
    seeds = rng.choice(n, size=num_seeds, replace=False)
    plan = SamplePlan(fanouts=(3, 2)[: len(dims) - 1], batch_size=num_seeds)
    sub = sample_layered(g, seeds, plan, np.random.default_rng(seed + 1))
    net = init_network(kind, list(dims), np.random.default_rng(seed + 2), np.float64)
    h0 = np.random.default_rng(seed + 3).normal(size=(sub.layers[0].num_src, dims[0]))
    labels = np.random.default_rng(seed + 4).integers(0, dims[-1], num_seeds)
    return sub, net, h0, labels


# ------------------------------------------------------- frozen examples


def test_gcn_isolated_node_is_identity():
    block = single_block(1, 0, [])
    params = LayerParams(np.eye(2), np.zeros(2))
    h_in = np.array([[1.5, -2.0]])
    out = layer_forward(LayerKind.GCN, params, block, h_in, activation=False)
    np.testing.assert_allclose(out, h_in, atol=1e-15)  # self-loop weight is 1


def test_sage_path_hand_computed():
    # dst a,b; src a,b,c; edges a<-b and b<-c; identity self / doubling neigh
    block = single_block(2, 1, [(0, 1), (1, 2)])
    params = LayerParams(
        np.eye(2), np.array([0.5, -0.5]), weight_neigh=2.0 * np.eye(2)
    )
    h_in = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    out = layer_forward(LayerKind.SAGE_MEAN, params, block, h_in, activation=False)
    np.testing.assert_allclose(out, [[1.5, 1.5], [2.5, 2.5]], atol=1e-15)


def test_gcn_zero_sampled_neighbors_keeps_self_term():
    # row 1 has no sampled edges but a nonzero recorded degree elsewhere
    block = single_block(2, 1, [(0, 2)], dst_deg=[1, 0], src_deg=[0, 3, 0])
    params = LayerParams(np.eye(1), np.zeros(1))
    h_in = np.array([[1.0], [2.0], [4.0]])
    out = layer_forward(LayerKind.GCN, params, block, h_in, activation=False)
    # row1: only self loop, weight 1/sqrt((0+1)(3+1)) = 1/2
    np.testing.assert_allclose(out[1], [1.0], atol=1e-15)
    # row0: self 1/sqrt(2*1)*1 + edge 1/sqrt(2*1)*4
    np.testing.assert_allclose(out[0], [5.0 / np.sqrt(2.0)], atol=1e-14)


def test_sage_zero_sampled_neighbors_zero_aggregate():
    block = single_block(1, 0, [])
    params = LayerParams(np.eye(1), np.zeros(1), weight_neigh=np.eye(1))
    out = layer_forward(
        LayerKind.SAGE_MEAN, params, block, np.array([[3.0]]), activation=False
    )
    np.testing.assert_allclose(out, [[3.0]], atol=1e-15)


# ---------------------------------------------------------- dense oracles


@pytest.mark.parametrize("kind", [LayerKind.GCN, LayerKind.SAGE_MEAN])
def test_layer_forward_matches_dense_oracle(kind):
    for seed in range(8):
        sub, net, h0, _ = sampled_instance(seed, kind, dims=(3, 5))
        block = sub.layers[0]
        p = net.layers[0]
        got = layer_forward(kind, p, block, h0, activation=True)
        if kind is LayerKind.GCN:
            want = dense_gcn(block, h0, p.weight, p.bias, act=True)
        else:
            want = dense_sage(block, h0, p.weight, p.weight_neigh, p.bias, act=True)
        np.testing.assert_allclose(got, want, atol=1e-12)
        assert np.all(np.isfinite(got))


def test_src_permutation_with_relabel_is_invariant():
    sub, net, h0, _ = sampled_instance(3, LayerKind.GCN, dims=(3, 4))
    block = sub.layers[0]
    p = net.layers[0]
    base = layer_forward(LayerKind.GCN, p, block, h0, activation=False)
    # permute the non-prefix tail of the frontier and relabel columns
    n_dst, n_src = block.num_dst, block.num_src
    tail = np.arange(n_dst, n_src)
    perm = np.concatenate([np.arange(n_dst), np.random.default_rng(0).permutation(tail)])
    inv = np.empty(n_src, dtype=np.int64)
    inv[perm] = np.arange(n_src)
    block2 = LayerBlock(
        dst_nodes=block.dst_nodes,
        src_nodes=block.src_nodes[perm],
        adj=Csr2Graph(
            block.adj.start.copy(),
            block.adj.end.copy(),
            inv[block.adj.col_indices],
            block.adj.num_nodes,
        ),
        dst_deg=block.dst_deg,
        src_deg=block.src_deg[perm],
    )
    out = layer_forward(LayerKind.GCN, p, block2, h0[perm], activation=False)
    np.testing.assert_allclose(out, base, atol=1e-12)


# ------------------------------------------------------------ mixed input


def test_mixed_with_empty_cache_is_bit_identical():
    sub, net, h0, _ = sampled_instance(5, LayerKind.GCN, dims=(3, 4))
    block = sub.layers[0]
    p = net.layers[0]
    pure = layer_forward(LayerKind.GCN, p, block, h0)
    mixed = mixed_layer_forward(
        LayerKind.GCN, p, block, h0, (np.empty(0, np.int64), np.empty((0, 3)))
    )
    np.testing.assert_array_equal(pure, mixed)


@pytest.mark.parametrize("kind", [LayerKind.GCN, LayerKind.SAGE_MEAN])
def test_mixed_with_exact_rows_matches_pure(kind):
    sub, net, h0, _ = sampled_instance(6, kind, dims=(3, 4))
    block = sub.layers[0]
    p = net.layers[0]
    pure = layer_forward(kind, p, block, h0)
    take = np.random.default_rng(1).choice(block.num_src, 3, replace=False)
    ids = block.src_nodes[take]
    mask = np.ones(block.num_src, dtype=bool)
    mask[take] = False
    mixed = mixed_layer_forward(kind, p, block, h0[mask], (ids, h0[take]))
    np.testing.assert_array_equal(pure, mixed)


def test_mixed_coverage_gap_rejected():
    sub, net, h0, _ = sampled_instance(7, LayerKind.GCN, dims=(3, 4))
    block = sub.layers[0]
    p = net.layers[0]
    with pytest.raises(ValueError, match="coverage gap"):
        mixed_layer_forward(
            LayerKind.GCN, p, block, h0[:-1], (np.empty(0, np.int64), np.empty((0, 3)))
        )
    with pytest.raises(ValueError, match="not in the block frontier"):
        bogus = np.array([10_000])
        mixed_layer_forward(LayerKind.GCN, p, block, h0[:-1], (bogus, h0[:1]))


# ------------------------------------------------------------------ loss


def test_cross_entropy_uniform_logits():
    for c in (2, 5, 9):
        logits = np.zeros((4, c))
        loss, d = cross_entropy(logits, np.zeros(4, dtype=int))
        np.testing.assert_allclose(loss, np.log(c), atol=1e-12)
        assert d.shape == logits.shape


def test_cross_entropy_confident_correct_goes_to_zero():
    logits = np.zeros((1, 3))
    logits[0, 1] = 50.0
    loss, _ = cross_entropy(logits, np.array([1]))
    assert loss < 1e-15


def test_cross_entropy_gradient_matches_fd():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, 5)
    _, d = cross_entropy(logits, labels)
    fd = fd_grad(lambda: cross_entropy(logits, labels)[0], logits)
    np.testing.assert_allclose(d, fd, rtol=1e-6, atol=1e-9)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


# --------------------------------------------------- end-to-end gradients


def network_loss(net, sub, h0, labels, compute_rows=None, injected=None):
    tape = forward_pass(net, sub.layers, h0, compute_rows, injected)
    return cross_entropy(tape.logits, labels)[0]


@pytest.mark.parametrize("kind", [LayerKind.GCN, LayerKind.SAGE_MEAN])
def test_fd_gradients_pure(kind):
    for seed in (0, 1):
        sub, net, h0, labels = sampled_instance(seed, kind)
        tape = forward_pass(net, sub.layers, h0)
        loss, d_logits = cross_entropy(tape.logits, labels)
        grads, _, _ = backward(net, sub.layers, tape, d_logits)
        f = lambda: network_loss(net, sub, h0, labels)
        for p, g in zip(net.layers, grads):
            for (name, arr), (_, garr) in zip(p.named_arrays(), g.named_arrays()):
                fd = fd_grad(f, arr)
                np.testing.assert_allclose(
                    garr, fd, rtol=1e-5, atol=1e-8, err_msg=f"{kind} {name}"
                )


@pytest.mark.parametrize("kind", [LayerKind.GCN, LayerKind.SAGE_MEAN])
def test_fd_gradients_with_injected_leaf_rows(kind):
    seed = 2
    sub, net, h0, labels = sampled_instance(seed, kind)
    inner = sub.layers[0]
    inj_rows = np.array([0, 2], dtype=np.int64)
    inj_vals = np.random.default_rng(9).normal(size=(2, net.layers[0].weight.shape[1]))
    keep = np.setdiff1d(np.arange(inner.num_dst), inj_rows)
    compute_rows = [keep, None]
    injected = [(inj_rows, inj_vals), None]
    tape = forward_pass(net, sub.layers, h0, compute_rows, injected)
    loss, d_logits = cross_entropy(tape.logits, labels)
    grads, node_grads, _ = backward(net, sub.layers, tape, d_logits)
    f = lambda: network_loss(net, sub, h0, labels, compute_rows, injected)
    for p, g in zip(net.layers, grads):
        for (name, arr), (_, garr) in zip(p.named_arrays(), g.named_arrays()):
            fd = fd_grad(f, arr)
            np.testing.assert_allclose(
                garr, fd, rtol=1e-5, atol=1e-8, err_msg=f"{kind} {name}"
            )
    # gradient w.r.t. the injected rows themselves (they are leaves)
    fd_inj = fd_grad(f, inj_vals)
    np.testing.assert_allclose(node_grads[0][inj_rows], fd_inj, rtol=1e-5, atol=1e-8)


# -------------------------------------------------------------- optimizers


def test_sgd_step_is_exact():
    net = init_network(LayerKind.GCN, [3, 4], np.random.default_rng(0), np.float64)
    w0 = net.layers[0].weight.copy()
    g = LayerParams(np.ones((3, 4)), np.ones(4))
    sgd_step(net, [g], eta=0.25)
    np.testing.assert_array_equal(net.layers[0].weight, w0 - 0.25 * np.ones((3, 4)))


def test_adam_step_moves_and_stays_finite():
    net = init_network(LayerKind.SAGE_MEAN, [3, 4], np.random.default_rng(0), np.float64)
    state = AdamState.for_network(net)
    g = [
        LayerParams(
            np.ones((3, 4)), np.ones(4), weight_neigh=np.ones((3, 4))
        )
    ]
    before = net.layers[0].weight.copy()
    adam_step(net, g, state, eta=1e-2)
    assert state.t == 1
    assert np.all(np.isfinite(net.layers[0].weight))
    assert not np.array_equal(before, net.layers[0].weight)


def test_node_grad_norms_oracle():
    m = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 1.0]], dtype=np.float32)
    got = node_grad_norms(m)
    np.testing.assert_allclose(got, [5.0, 0.0, np.sqrt(2.0)], rtol=1e-7)
