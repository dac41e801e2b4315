"""Graph container tests against brute-force COO/CSR oracles."""

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from histgnn.graphs import (
    CooGraph,
    Csr2Graph,
    build_csr,
    build_csr2,
    normalize_adjacency,
    read_edge_list,
    write_edge_list,
)

# ---------------------------------------------------------------- oracles


def coo_in_neighbors(edges: CooGraph, v: int) -> list[int]:
    """In-neighbor list of v by scanning the raw edge arrays in input order."""
    return [int(s) for s, d in zip(edges.src, edges.dst) if d == v]


def coo_delete_rows(edges: CooGraph, pruned: set[int]) -> dict[int, list[int]]:
    """Per-node in-neighbor lists after deleting all in-edges of pruned nodes."""
    out = {v: [] for v in range(edges.num_nodes)}
    for s, d in zip(edges.src, edges.dst):
        if int(d) not in pruned:
            out[int(d)].append(int(s))
    return out


def csr_oracle_neighbors(edges: CooGraph) -> dict[int, list[int]]:
    """Sorted in-neighbor multisets via scipy's CSR conversion."""
    m = sp.coo_matrix(
        (np.ones(edges.num_edges), (edges.dst, edges.src)),
        shape=(edges.num_nodes, edges.num_nodes),
    ).tocsr()
    out = {}
    for v in range(edges.num_nodes):
        row = m.indices[m.indptr[v] : m.indptr[v + 1]]
        counts = m.data[m.indptr[v] : m.indptr[v + 1]].astype(int)
        out[v] = sorted(np.repeat(row, counts).tolist())
    return out


def dense_norm_adjacency(edges: CooGraph) -> np.ndarray:
    """(D+I)^-1/2 (A+I) (D+I)^-1/2 with dense arithmetic on the 0/1 adjacency."""
    n = edges.num_nodes
    a = np.zeros((n, n))
    a[edges.src, edges.dst] = 1.0
    d = a.sum(axis=1)
    inv = np.diag(1.0 / np.sqrt(d + 1.0))
    return inv @ (a + np.eye(n)) @ inv


@st.composite
def coo_graphs(draw, max_nodes=24, max_edges=80):
    n = draw(st.integers(min_value=1, max_value=max_nodes))
    m = draw(st.integers(min_value=0, max_value=max_edges))
    src = draw(
        st.lists(st.integers(0, n - 1), min_size=m, max_size=m).map(
            lambda xs: np.asarray(xs, dtype=np.int64)
        )
    )
    dst = draw(
        st.lists(st.integers(0, n - 1), min_size=m, max_size=m).map(
            lambda xs: np.asarray(xs, dtype=np.int64)
        )
    )
    return CooGraph(src, dst, n)


# ------------------------------------------------------- frozen small cases


def test_build_csr2_three_node_example():
    # edges {(1->0), (2->0), (2->1)}: in-neighbor lists 0:{1,2} 1:{2} 2:{}
    g = build_csr2(CooGraph([1, 2, 2], [0, 0, 1], 3))
    assert g.neighbors(0).tolist() == [1, 2]
    assert g.neighbors(1).tolist() == [2]
    assert g.neighbors(2).tolist() == []
    assert g.in_degrees().tolist() == [2, 1, 0]


def test_build_csr2_empty_graph():
    g = build_csr2(CooGraph([], [], 3))
    assert g.start.tolist() == [0, 0, 0]
    assert g.end.tolist() == [0, 0, 0]
    assert g.num_edges == 0


def test_duplicate_edges_are_kept():
    g = build_csr2(CooGraph([1, 1], [0, 0], 3))
    assert g.neighbors(0).tolist() == [1, 1]


def test_prune_three_node_example():
    g = build_csr2(CooGraph([1, 2, 2], [0, 0, 1], 3))
    before = g.col_indices.copy()
    g.prune_in_neighbors(0)
    assert g.neighbors(0).tolist() == []
    assert g.neighbors(1).tolist() == [2]
    np.testing.assert_array_equal(g.col_indices, before)


def test_prune_zero_degree_node_is_a_noop():
    g = build_csr2(CooGraph([1], [0], 3))
    snap = (g.start.copy(), g.end.copy())
    g.prune_in_neighbors(2)
    np.testing.assert_array_equal(g.start, snap[0])
    np.testing.assert_array_equal(g.end, snap[1])


def test_prune_write_instrumentation():
    g = build_csr2(CooGraph([1, 2], [0, 0], 3))
    assert g.prune_writes == 0
    g.prune_in_neighbors(0)
    assert g.prune_writes == 1  # a single offset cell per prune


def test_out_of_range_ids_rejected():
    with pytest.raises(ValueError):
        CooGraph([0], [3], 3)
    g = build_csr2(CooGraph([0], [1], 2))
    with pytest.raises(ValueError):
        g.neighbors(5)
    with pytest.raises(ValueError):
        g.prune_in_neighbors(-1)


def test_fresh_offsets_are_contiguous():
    g = build_csr2(CooGraph([1, 2, 0, 1], [0, 1, 2, 2], 3))
    for i in range(1, g.num_nodes):
        assert g.start[i] == g.end[i - 1]
    assert len(g.start) == len(g.end) == g.num_nodes
    assert len(g.col_indices) == 4


# ------------------------------------------------------------- properties


@settings(max_examples=60, deadline=None)
@given(coo_graphs())
def test_csr2_neighbors_match_coo_scan(edges):
    g = build_csr2(edges)
    for v in range(edges.num_nodes):
        assert g.neighbors(v).tolist() == coo_in_neighbors(edges, v)


@settings(max_examples=60, deadline=None)
@given(coo_graphs())
def test_csr2_multiset_matches_scipy_csr(edges):
    g = build_csr2(edges)
    oracle = csr_oracle_neighbors(edges)
    for v in range(edges.num_nodes):
        assert sorted(g.neighbors(v).tolist()) == oracle[v]


@settings(max_examples=60, deadline=None)
@given(coo_graphs(), st.data())
def test_prune_matches_coo_deletion_oracle(edges, data):
    g = build_csr2(edges)
    checksum = g.col_checksum()
    k = data.draw(st.integers(0, edges.num_nodes))
    pruned = set(
        data.draw(
            st.lists(st.integers(0, edges.num_nodes - 1), min_size=k, max_size=k)
        )
    )
    for v in pruned:
        g.prune_in_neighbors(v)
    oracle = coo_delete_rows(edges, pruned)
    for v in range(edges.num_nodes):
        assert g.neighbors(v).tolist() == oracle[v]
    assert g.col_checksum() == checksum
    assert np.all(g.start <= g.end)


@settings(max_examples=40, deadline=None)
@given(coo_graphs())
def test_to_coo_round_trip_preserves_edge_multiset(edges):
    back = build_csr2(edges).to_coo()
    want = sorted(zip(edges.src.tolist(), edges.dst.tolist()))
    got = sorted(zip(back.src.tolist(), back.dst.tolist()))
    assert got == want
    assert back.num_nodes == edges.num_nodes


def test_csr_matches_csr2_rows():
    rng = np.random.default_rng(0)
    edges = CooGraph(rng.integers(0, 12, 40), rng.integers(0, 12, 40), 12)
    c1, c2 = build_csr(edges), build_csr2(edges)
    for v in range(12):
        assert c1.neighbors(v).tolist() == c2.neighbors(v).tolist()


# -------------------------------------------------------- normalization


def test_normalize_triangle_frozen():
    # undirected triangle: every degree 2, every entry of the result is 1/3
    src = [0, 1, 1, 2, 2, 0]
    dst = [1, 0, 2, 1, 0, 2]
    got = normalize_adjacency(CooGraph(src, dst, 3)).dense()
    np.testing.assert_allclose(got, np.full((3, 3), 1.0 / 3.0), atol=1e-12)


def test_normalize_isolated_node_identity():
    got = normalize_adjacency(CooGraph([], [], 1)).dense()
    np.testing.assert_allclose(got, np.eye(1), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(coo_graphs(max_nodes=16, max_edges=40))
def test_normalize_matches_dense_oracle(edges):
    got = normalize_adjacency(edges).dense()
    np.testing.assert_allclose(got, dense_norm_adjacency(edges), atol=1e-12)


def test_normalize_symmetric_for_undirected_input():
    rng = np.random.default_rng(3)
    s = rng.integers(0, 10, 30)
    d = rng.integers(0, 10, 30)
    src = np.concatenate([s, d])
    dst = np.concatenate([d, s])
    m = normalize_adjacency(CooGraph(src, dst, 10)).dense()
    np.testing.assert_allclose(m, m.T, atol=1e-12)


def test_normalize_row_degrees_use_dedup_adjacency():
    # duplicate edge must not inflate the degree
    single = normalize_adjacency(CooGraph([0], [1], 2)).dense()
    doubled = normalize_adjacency(CooGraph([0, 0], [1, 1], 2)).dense()
    np.testing.assert_allclose(single, doubled, atol=1e-15)


# ------------------------------------------------------------ edge lists


def test_edge_list_round_trip(tmp_path):
    path = tmp_path / "edges.txt"
    edges = CooGraph([0, 2, 1], [1, 0, 2], 3)
    write_edge_list(path, edges)
    back = read_edge_list(path, num_nodes=3)
    np.testing.assert_array_equal(back.src, edges.src)
    np.testing.assert_array_equal(back.dst, edges.dst)


def test_edge_list_comments_and_blanks(tmp_path):
    path = tmp_path / "edges.txt"
    path.write_text("# header\n\n0 1  # inline\n1 2\n")
    back = read_edge_list(path)
    assert back.num_edges == 2
    assert back.num_nodes == 3


def test_edge_list_parse_error_names_file_and_line(tmp_path):
    path = tmp_path / "edges.txt"
    path.write_text("0 1\n0 one\n")
    with pytest.raises(ValueError, match=r"edges\.txt:2"):
        read_edge_list(path)


def test_edge_list_out_of_range_rejected(tmp_path):
    path = tmp_path / "edges.txt"
    path.write_text("0 9\n")
    with pytest.raises(ValueError, match="out of range"):
        read_edge_list(path, num_nodes=3)
