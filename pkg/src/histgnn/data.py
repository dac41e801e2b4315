"""Dataset containers, on-disk formats, and synthetic graph generators.

On-disk layout of a dataset directory:
  edges.txt     "src dst" per line (see graphs.read_edge_list)
  features.bin  16-byte header (two little-endian uint64: rows, cols),
                then rows*cols little-endian float32, row-major
  labels.txt    one class id per line, line i = node i
  train.txt / val.txt / test.txt   one node id per line

All parse errors name the offending file (and line where there is one).
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .graphs import CooGraph, read_edge_list, write_edge_list

FEATURE_HEADER = struct.Struct("<QQ")
DATASET_FILES = (
    "edges.txt",
    "features.bin",
    "labels.txt",
    "train.txt",
    "val.txt",
    "test.txt",
)


@dataclass
class Dataset:
    graph: CooGraph
    features: np.ndarray
    labels: np.ndarray
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.graph.num_nodes
        if self.features.shape[0] != n:
            raise ValueError(
                f"{self.features.shape[0]} feature rows for {n} graph nodes"
            )
        if len(self.labels) != n:
            raise ValueError(f"{len(self.labels)} labels for {n} graph nodes")
        if n and self.labels.min() < 0:
            raise ValueError("negative class id")
        for name in ("train_ids", "val_ids", "test_ids"):
            ids = np.asarray(getattr(self, name), dtype=np.int64)
            setattr(self, name, ids)
            if len(ids) and (ids.min() < 0 or ids.max() >= n):
                raise ValueError(f"{name} contains node ids outside [0, {n})")
        if len(np.intersect1d(self.train_ids, self.val_ids)) or len(
            np.intersect1d(self.train_ids, self.test_ids)
        ) or len(np.intersect1d(self.val_ids, self.test_ids)):
            raise ValueError("train/val/test splits overlap")

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


# ------------------------------------------------------------- file formats


def save_features(path, features) -> None:
    mat = np.ascontiguousarray(features, dtype="<f4")
    if mat.ndim != 2:
        raise ValueError("features must be a 2-d matrix")
    with open(path, "wb") as fh:
        fh.write(FEATURE_HEADER.pack(mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(FEATURE_HEADER.size)
        if len(header) < FEATURE_HEADER.size:
            raise ValueError(
                f"{path}: truncated header ({len(header)} bytes, need"
                f" {FEATURE_HEADER.size})"
            )
        rows, cols = FEATURE_HEADER.unpack(header)
        payload = fh.read()
    if len(payload) != rows * cols * 4:
        raise ValueError(
            f"{path}: header promises {rows}x{cols} floats"
            f" ({rows * cols * 4} bytes), payload holds {len(payload)} bytes"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    return np.ascontiguousarray(flat.reshape(rows, cols), dtype=np.float32)


def _read_int_lines(path, what, upper=None) -> np.ndarray:
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                v = int(line)
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: expected a {what}, got {line!r}"
                ) from None
            if v < 0:
                raise ValueError(f"{path}:{lineno}: negative {what} {v}")
            if upper is not None and v >= upper:
                raise ValueError(
                    f"{path}:{lineno}: {what} {v} out of range [0, {upper})"
                )
            values.append(v)
    return np.asarray(values, dtype=np.int64)


def ingest(directory) -> Dataset:
    d = os.fspath(directory)
    paths = {name: os.path.join(d, name) for name in DATASET_FILES}
    for name, path in paths.items():
        if not os.path.exists(path):
            raise FileNotFoundError(f"{d}: missing {name}")
    labels = _read_int_lines(paths["labels.txt"], "class id")
    n = len(labels)
    features = load_features(paths["features.bin"])
    if features.shape[0] != n:
        raise ValueError(
            f"{paths['features.bin']}: {features.shape[0]} feature rows"
            f" for {n} labeled nodes"
        )
    graph = read_edge_list(paths["edges.txt"], num_nodes=n)
    splits = [
        _read_int_lines(paths[name], "node id", upper=n)
        for name in ("train.txt", "val.txt", "test.txt")
    ]
    return Dataset(graph, features, labels, *splits)


def save_dataset(directory, ds: Dataset) -> None:
    d = os.fspath(directory)
    os.makedirs(d, exist_ok=True)
    write_edge_list(os.path.join(d, "edges.txt"), ds.graph)
    save_features(os.path.join(d, "features.bin"), ds.features)
    id_files = {
        "labels.txt": ds.labels,
        "train.txt": ds.train_ids,
        "val.txt": ds.val_ids,
        "test.txt": ds.test_ids,
    }
    for name, ids in id_files.items():
        with open(os.path.join(d, name), "w", encoding="utf-8") as fh:
            fh.writelines(f"{v}\n" for v in ids)


# ---------------------------------------------------------------- synthesis


def _split_ids(n, rng):
    """Deterministic 60/20/20 split."""
    perm = rng.permutation(n)
    n_train = int(0.6 * n)
    n_val = int(0.2 * n)
    return (
        np.sort(perm[:n_train]),
        np.sort(perm[n_train : n_train + n_val]),
        np.sort(perm[n_train + n_val :]),
    )


def synth_sbm(
    n,
    rng,
    blocks=8,
    p_in=None,
    p_out=None,
    feature_dim=32,
    noise=1.0,
):
    """Stochastic block model with block-id labels.

    Features are a per-block Gaussian mean plus per-node Gaussian noise, so
    class difficulty is set by `noise`. Defaults target ~10 within-block
    neighbors per node regardless of n.
    """
    if n < 2 or blocks < 1 or blocks > n:
        raise ValueError(f"need 2 <= blocks <= n, got n={n} blocks={blocks}")
    if p_in is None:
        p_in = min(1.0, 10.0 * blocks / n)
    if p_out is None:
        p_out = p_in / 20.0
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise ValueError("edge probabilities must lie in [0, 1]")
    sizes = np.full(blocks, n // blocks)
    sizes[: n % blocks] += 1
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    labels = np.repeat(np.arange(blocks), sizes)

    srcs, dsts = [], []
    for i in range(blocks):
        for j in range(i, blocks):
            p = p_in if i == j else p_out
            if p <= 0:
                continue
            if i == j:
                u, v = np.triu_indices(sizes[i], k=1)
                u = u + offsets[i]
                v = v + offsets[i]
            else:
                u = np.repeat(np.arange(offsets[i], offsets[i + 1]), sizes[j])
                v = np.tile(np.arange(offsets[j], offsets[j + 1]), sizes[i])
            keep = rng.random(u.size) < p
            srcs.append(u[keep])
            dsts.append(v[keep])
    half_src = np.concatenate(srcs) if srcs else np.empty(0, np.int64)
    half_dst = np.concatenate(dsts) if dsts else np.empty(0, np.int64)
    graph = CooGraph(
        np.concatenate([half_src, half_dst]),
        np.concatenate([half_dst, half_src]),
        n,
    )
    means = rng.standard_normal((blocks, feature_dim))
    features = (
        means[labels] + noise * rng.standard_normal((n, feature_dim))
    ).astype(np.float32)
    return Dataset(graph, features, labels, *_split_ids(n, rng))


def synth_power_law(n, rng, m=3, feature_dim=32, classes=8):
    """Preferential attachment: node v >= m attaches to m distinct existing
    nodes drawn proportional to degree, giving a heavy-tailed degree
    distribution. Labels are uniform classes (structure-only benchmark)."""
    if m < 1 or n < m + 1:
        raise ValueError(f"need n >= m + 1 >= 2, got n={n} m={m}")
    src, dst = [], []
    pool = []  # one entry per edge endpoint; uniform draw = degree-weighted
    targets = list(range(m))
    for v in range(m, n):
        src.extend([v] * len(targets))
        dst.extend(targets)
        pool.extend(targets)
        pool.extend([v] * len(targets))
        chosen = set()
        while len(chosen) < m:
            chosen.add(pool[rng.integers(len(pool))])
        targets = sorted(chosen)
    half_src = np.asarray(src, dtype=np.int64)
    half_dst = np.asarray(dst, dtype=np.int64)
    graph = CooGraph(
        np.concatenate([half_src, half_dst]),
        np.concatenate([half_dst, half_src]),
        n,
    )
    features = rng.standard_normal((n, feature_dim)).astype(np.float32)
    labels = rng.integers(0, classes, size=n)
    return Dataset(graph, features, labels, *_split_ids(n, rng))


SYNTH_MODELS = {"sbm": synth_sbm, "power_law": synth_power_law}


def synth_graph(n, model, params, rng) -> Dataset:
    """Dispatch to a generator by name; `rng` is a Generator or an int seed."""
    key = str(model).lower().replace("-", "_").replace("powerlaw", "power_law")
    if key not in SYNTH_MODELS:
        raise ValueError(
            f"unknown synthetic model {model!r}; choose from"
            f" {sorted(SYNTH_MODELS)}"
        )
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return SYNTH_MODELS[key](n, rng, **dict(params))
