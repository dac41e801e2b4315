"""Graph containers used across the package.

Three sparse layouts: a plain COO edge list, classic CSR, and a dual-offset
CSR variant (separate ``start`` and ``end`` arrays) whose per-node neighbor
lists can be logically emptied in O(1) without touching the column array.
Edges are directed and stored as in-neighbor lists: row ``v`` of a converted
graph holds the sources of edges pointing at ``v``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


def _as_id_array(x) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.int64)
    if a.ndim != 1:
        raise ValueError(f"expected a 1-d id array, got shape {a.shape}")
    return a


def _check_ids(a: np.ndarray, num_nodes: int, what: str) -> None:
    if len(a) == 0:
        return
    lo, hi = int(a.min()), int(a.max())
    if lo < 0 or hi >= num_nodes:
        raise ValueError(
            f"{what} id out of range: saw {lo if lo < 0 else hi} "
            f"for a graph with {num_nodes} nodes"
        )


@dataclass
class CooGraph:
    """Directed multigraph as parallel edge arrays; (src[i], dst[i]) is src -> dst.

    Duplicate edges are kept as-is; deduplication is the ingester's job.
    """

    src: np.ndarray
    dst: np.ndarray
    num_nodes: int

    def __post_init__(self):
        self.src = _as_id_array(self.src)
        self.dst = _as_id_array(self.dst)
        if len(self.src) != len(self.dst):
            raise ValueError(
                f"src/dst length mismatch: {len(self.src)} vs {len(self.dst)}"
            )
        if self.num_nodes < 0:
            raise ValueError("num_nodes must be non-negative")
        _check_ids(self.src, self.num_nodes, "src")
        _check_ids(self.dst, self.num_nodes, "dst")

    @property
    def num_edges(self) -> int:
        return len(self.src)


@dataclass
class CsrGraph:
    """Classic CSR over in-neighbors: row v spans col_indices[offsets[v]:offsets[v+1]]."""

    offsets: np.ndarray
    col_indices: np.ndarray
    num_nodes: int

    def neighbors(self, v: int) -> np.ndarray:
        return self.col_indices[self.offsets[v] : self.offsets[v + 1]]


@dataclass
class Csr2Graph:
    """CSR with independent per-row start/end offsets into a shared column array.

    Freshly converted graphs have contiguous rows (start[i+1] == end[i]).
    Pruning a row just sets end[v] = start[v]; col_indices is never mutated,
    so pruned entries stay physically present but unreachable.
    """

    start: np.ndarray
    end: np.ndarray
    col_indices: np.ndarray
    num_nodes: int
    # Instrumentation: cumulative count of offset cells written by pruning.
    prune_writes: int = field(default=0, compare=False)

    def __post_init__(self):
        self.start = _as_id_array(self.start)
        self.end = _as_id_array(self.end)
        self.col_indices = _as_id_array(self.col_indices)
        if len(self.start) != self.num_nodes or len(self.end) != self.num_nodes:
            raise ValueError("offset arrays must have num_nodes entries")
        if np.any(self.end < self.start):
            raise ValueError("row with end < start")
        if self.num_nodes and (
            np.any(self.start < 0) or np.any(self.end > len(self.col_indices))
        ):
            raise ValueError("row offsets out of bounds of col_indices")

    @property
    def num_edges(self) -> int:
        return int(np.sum(self.end - self.start))

    def neighbors(self, v: int) -> np.ndarray:
        """In-neighbors of v as a view into the column array."""
        if not 0 <= v < self.num_nodes:
            raise ValueError(f"node {v} out of range for {self.num_nodes} nodes")
        return self.col_indices[self.start[v] : self.end[v]]

    def prune_in_neighbors(self, v: int) -> None:
        """Logically drop all in-edges of v. O(1): one offset cell written."""
        if not 0 <= v < self.num_nodes:
            raise ValueError(f"node {v} out of range for {self.num_nodes} nodes")
        self.end[v] = self.start[v]
        self.prune_writes += 1

    def prune_many(self, nodes: np.ndarray) -> None:
        nodes = _as_id_array(nodes)
        _check_ids(nodes, self.num_nodes, "prune")
        self.end[nodes] = self.start[nodes]
        self.prune_writes += len(nodes)

    def in_degrees(self) -> np.ndarray:
        return self.end - self.start

    def to_coo(self) -> CooGraph:
        """Surviving edges only; pruned entries are not emitted."""
        degs = self.end - self.start
        dst = np.repeat(np.arange(self.num_nodes, dtype=np.int64), degs)
        if len(dst) == 0:
            return CooGraph(np.empty(0, np.int64), np.empty(0, np.int64), self.num_nodes)
        keep = np.concatenate(
            [np.arange(self.start[v], self.end[v]) for v in range(self.num_nodes) if degs[v]]
        )
        return CooGraph(self.col_indices[keep], dst, self.num_nodes)

    def copy(self) -> "Csr2Graph":
        """Fresh offset arrays, shared column array (pruning never writes it)."""
        return Csr2Graph(
            self.start.copy(), self.end.copy(), self.col_indices, self.num_nodes
        )

    def col_checksum(self) -> int:
        return zlib.crc32(np.ascontiguousarray(self.col_indices).tobytes())


def build_csr(edges: CooGraph) -> CsrGraph:
    counts = np.bincount(edges.dst, minlength=edges.num_nodes)
    offsets = np.zeros(edges.num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    order = np.argsort(edges.dst, kind="stable")
    return CsrGraph(offsets, edges.src[order], edges.num_nodes)


def build_csr2(edges: CooGraph) -> Csr2Graph:
    """Group edges by destination, preserving input order within each row."""
    counts = np.bincount(edges.dst, minlength=edges.num_nodes)
    offsets = np.zeros(edges.num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    order = np.argsort(edges.dst, kind="stable")
    return Csr2Graph(
        start=offsets[:-1].copy(),
        end=offsets[1:].copy(),
        col_indices=edges.src[order],
        num_nodes=edges.num_nodes,
    )


@dataclass
class AdjacencyMatrixNorm:
    """Symmetrically normalized adjacency with self loops, (D+I)^-1/2 (A+I) (D+I)^-1/2.

    A is the deduplicated 0/1 adjacency of the input edge list (dense row u,
    column v nonzero iff an edge u -> v exists); D its row-sum degree matrix.
    """

    matrix: sp.csr_matrix
    num_nodes: int

    def dense(self) -> np.ndarray:
        return np.asarray(self.matrix.todense())


def normalize_adjacency(edges: CooGraph) -> AdjacencyMatrixNorm:
    n = edges.num_nodes
    data = np.ones(edges.num_edges, dtype=np.float64)
    a = sp.coo_matrix((data, (edges.src, edges.dst)), shape=(n, n)).tocsr()
    a.sum_duplicates()
    a.data = np.ones_like(a.data)  # multigraph edges collapse to 0/1
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg + 1.0)
    d_half = sp.diags(inv_sqrt)
    a_hat = d_half @ (a + sp.eye(n, format="csr")) @ d_half
    return AdjacencyMatrixNorm(a_hat.tocsr(), n)


def read_edge_list(path, num_nodes: int | None = None) -> CooGraph:
    """Parse "src dst" per line; blank lines and '#' comments are skipped.

    Raises ValueError naming the file and 1-based line number on bad input.
    """
    src, dst = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(
                    f"{path}:{lineno}: expected 'src dst', got {raw.strip()!r}"
                )
            try:
                s, d = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: non-integer node id in {raw.strip()!r}"
                ) from None
            if s < 0 or d < 0:
                raise ValueError(f"{path}:{lineno}: negative node id")
            src.append(s)
            dst.append(d)
    src_a = np.asarray(src, dtype=np.int64)
    dst_a = np.asarray(dst, dtype=np.int64)
    if num_nodes is None:
        num_nodes = int(max(src_a.max(initial=-1), dst_a.max(initial=-1))) + 1
    try:
        return CooGraph(src_a, dst_a, num_nodes)
    except ValueError as err:
        raise ValueError(f"{path}: {err}") from None


def write_edge_list(path, edges: CooGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, d in zip(edges.src, edges.dst):
            fh.write(f"{s} {d}\n")
