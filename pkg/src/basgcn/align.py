"""Prototype alignment: maps every graph onto a fixed-size grid of M vertices.

For each depth level K = 1..L the DB representations of all vertices are
clustered into M prototypes. A vertex is aligned to its nearest prototype,
giving a 0/1 correspondence matrix C; the grid features and adjacency at that
level are C^T X and C^T (A + I) C, rows re-indexed by a similarity-degree
ordering of the prototypes. Levels are averaged and the averaged adjacency is
oriented into the backtrackless (directed) form.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .depth import db_representation
from .graphio import Graph, GraphDataset, add_self_loops, vertex_feature_matrix

KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-6


@dataclass(frozen=True)
class PrototypeSet:
    level: int
    centroids: np.ndarray  # (M, level)
    order: np.ndarray  # grid position -> prototype index
    seed: int

    def __post_init__(self):
        if self.centroids.ndim != 2 or self.centroids.shape[1] != self.level:
            raise ValueError("centroids must be M x level")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("non-finite centroid")
        if sorted(self.order.tolist()) != list(range(len(self.centroids))):
            raise ValueError("order is not a permutation")

    @property
    def M(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class AlignedGrid:
    features: np.ndarray  # (M, c)
    adjacency: np.ndarray  # (M, M) symmetric
    backtrackless: np.ndarray  # (M, M) directed
    label: int


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    n_iter: int


# ---------------------------------------------------------------------------
# prototypes


def collect_representations(db_mats: Sequence[np.ndarray], K: int | None = None):
    """Stack per-graph DB matrices (optionally truncated to the first K depths).

    Returns ``(stacked, offsets)``; graph p owns rows ``offsets[p]:offsets[p]+n_p``.
    """
    mats = [m if K is None else m[:, :K] for m in db_mats]
    sizes = [m.shape[0] for m in mats]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if sizes else np.zeros(0, np.int64)
    width = mats[0].shape[1] if mats else (K or 0)
    stacked = np.vstack(mats) if mats else np.zeros((0, width))
    return stacked, offsets


def _sq_dists(X, C):
    d = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    return np.maximum(d, 0.0)


def kmeans(X: np.ndarray, M: int, seed: int, max_iter: int = KMEANS_MAX_ITER,
           tol: float = KMEANS_TOL) -> KMeansResult:
    """Lloyd's k-means with k-means++ seeding (scikit-learn, one init).

    Stops once no centroid moves by ``tol`` or more. Empty clusters are
    reseeded at the points farthest from their centroids.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if M < 1 or n < 1:
        raise ValueError("need at least one point and one prototype")
    if M > n:
        raise ValueError(f"cannot fit {M} prototypes to {n} points")
    # sklearn stops when the summed squared shift <= tol * mean feature variance;
    # tol**2 / variance keeps every single shift below tol.
    var = float(np.var(X, axis=0).mean())
    sk_tol = tol ** 2 / var if var > 0 else 0.0
    km = KMeans(n_clusters=M, init="k-means++", n_init=1, max_iter=max_iter, tol=sk_tol,
                random_state=int(seed) % 2 ** 32, algorithm="lloyd")
    with warnings.catch_warnings():
        # fewer distinct points than prototypes is expected on coarse levels
        warnings.simplefilter("ignore", ConvergenceWarning)
        km.fit(X)
    centroids = km.cluster_centers_.astype(np.float64)
    assign = _sq_dists(X, centroids).argmin(axis=1)
    return KMeansResult(centroids, assign, float(km.inertia_), int(km.n_iter_))


def fit_prototypes(reps: np.ndarray, M: int, seed: int) -> np.ndarray:
    return kmeans(reps, M, seed).centroids


def prototype_order(centroids: np.ndarray) -> np.ndarray:
    """Indices sorted by descending similarity degree (ties: lower index first).

    s(j, k) = exp(-||mu_j - mu_k|| / K); degree(j) = sum_k s(j, k).
    """
    K = centroids.shape[1]
    diff = centroids[:, None, :] - centroids[None, :, :]
    sim = np.exp(-np.sqrt((diff ** 2).sum(axis=2)) / K)
    degree = sim.sum(axis=1)
    return np.lexsort((np.arange(len(degree)), -degree))


def make_prototype_set(reps: np.ndarray, level: int, M: int, seed: int) -> PrototypeSet:
    centroids = fit_prototypes(reps, M, seed)
    return PrototypeSet(level, centroids, prototype_order(centroids), seed)


# ---------------------------------------------------------------------------
# per-graph alignment


def correspondence_matrix(db: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """|V| x M 0/1 matrix; vertex i -> nearest prototype (ties: smallest index)."""
    R = db[:, :protos.level]
    if R.shape[1] != protos.level:
        raise ValueError("DB depth smaller than prototype level")
    dist = np.sqrt(_sq_dists(R, protos.centroids))
    C = np.zeros((R.shape[0], protos.M))
    C[np.arange(R.shape[0]), dist.argmin(axis=1)] = 1.0
    return C


def aligned_features(C: np.ndarray, X: np.ndarray) -> np.ndarray:
    if C.shape[0] != X.shape[0]:
        raise ValueError("row counts differ")
    return C.T @ X


def aligned_adjacency(C: np.ndarray, A_tilde: np.ndarray) -> np.ndarray:
    return C.T @ A_tilde @ C


def backtracklessize(A_bar: np.ndarray) -> np.ndarray:
    """Keep entry (i, j) only when visiting probability P(i) <= P(j)."""
    A_bar = np.asarray(A_bar, dtype=np.float64)
    deg = A_bar.sum(axis=1)
    total = deg.sum()
    if total == 0:
        return A_bar.copy()
    P = deg / total
    return np.where(P[:, None] <= P[None, :], A_bar, 0.0)


def build_grid(g: Graph, dataset: GraphDataset, protos: Sequence[PrototypeSet],
               db: np.ndarray | None = None) -> AlignedGrid:
    """Average the per-level aligned grids of ``g`` over all prototype levels."""
    L = len(protos)
    if db is None:
        db = db_representation(g, max(p.level for p in protos))
    X = vertex_feature_matrix(g, dataset)
    A_tilde = add_self_loops(g)
    M = protos[0].M
    Xbar = np.zeros((M, X.shape[1]))
    Abar = np.zeros((M, M))
    for ps in protos:
        C = correspondence_matrix(db, ps)[:, ps.order]
        Xbar += aligned_features(C, X)
        Abar += aligned_adjacency(C, A_tilde)
    Xbar /= L
    Abar /= L
    return AlignedGrid(Xbar, Abar, backtracklessize(Abar), g.graph_label)


# ---------------------------------------------------------------------------
# whole-dataset preprocessing


def fingerprint(dataset: GraphDataset, M: int, L: int, seed: int,
                fit_indices: Sequence[int] | None = None) -> str:
    payload = {
        "dataset": dataset.structure_hash(),
        "M": int(M),
        "L": int(L),
        "seed": int(seed),
        "fit": None if fit_indices is None else hashlib.sha256(
            np.asarray(sorted(fit_indices), dtype="<i8").tobytes()).hexdigest(),
        "format": CACHE_VERSION,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class GridSet:
    grids: list
    prototypes: list
    fingerprint: str
    M: int
    L: int
    seed: int


def prepare_grids(dataset: GraphDataset, M: int, L: int, seed: int,
                  fit_indices: Sequence[int] | None = None, db_mats=None,
                  threads: int = 1) -> GridSet:
    """Fit L prototype levels and build the aligned grid of every graph.

    Prototypes are fitted on the vertices of ``fit_indices`` (all graphs when
    None). Class labels are never consulted.
    """
    if db_mats is None:
        db_mats = compute_db_matrices(dataset, L, threads)
    fit = range(len(dataset)) if fit_indices is None else fit_indices
    fit_mats = [db_mats[i] for i in fit]
    protos = []
    for K in range(1, L + 1):
        reps, _ = collect_representations(fit_mats, K)
        level_seed = int(np.random.SeedSequence([seed, K]).generate_state(1)[0])
        protos.append(make_prototype_set(reps, K, M, level_seed))
    grids = _map(lambda i: build_grid(dataset.graphs[i], dataset, protos, db_mats[i]),
                 range(len(dataset)), threads)
    return GridSet(grids, protos, fingerprint(dataset, M, L, seed, fit_indices), M, L, seed)


def compute_db_matrices(dataset: GraphDataset, L: int, threads: int = 1) -> list:
    return _map(lambda g: db_representation(g, L), dataset.graphs, threads)


def _map(fn, items, threads):
    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# grid cache
#
# All integers/floats little-endian.
#   magic        8 bytes  b"BASGRID\0"
#   version      u32
#   fingerprint  32 bytes (sha256 digest)
#   meta_len     u32, then meta_len bytes of UTF-8 JSON:
#                {"M", "L", "seed", "channels", "n_graphs"}
#   L prototype records, for K = 1..L:
#       level u32, M u32, centroids f8[M*level] (row-major),
#       order i8[M], seed i8
#   n_graphs grid records:
#       label i8, features f8[M*channels], adjacency f8[M*M],
#       backtrackless f8[M*M]

CACHE_MAGIC = b"BASGRID\0"
CACHE_VERSION = 1


class CacheError(Exception):
    """Grid cache missing, corrupt or built for another configuration."""


def write_grid_cache(path, gridset: GridSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    c = gridset.grids[0].features.shape[1] if gridset.grids else 0
    meta = json.dumps({"M": gridset.M, "L": gridset.L, "seed": gridset.seed,
                       "channels": c, "n_graphs": len(gridset.grids)}).encode()
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<I", CACHE_VERSION))
    buf.write(bytes.fromhex(gridset.fingerprint))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for ps in gridset.prototypes:
        buf.write(struct.pack("<II", ps.level, ps.M))
        buf.write(np.ascontiguousarray(ps.centroids, dtype="<f8").tobytes())
        buf.write(np.asarray(ps.order, dtype="<i8").tobytes())
        buf.write(struct.pack("<q", ps.seed))
    for grid in gridset.grids:
        buf.write(struct.pack("<q", grid.label))
        for arr in (grid.features, grid.adjacency, grid.backtrackless):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def read_grid_cache(path, expected_fingerprint: str | None = None) -> GridSet:
    path = Path(path)
    if not path.is_file():
        raise CacheError(f"no grid cache at {path}")
    data = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CacheError(f"truncated grid cache {path}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    def floats(count, shape):
        return np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    if take(8) != CACHE_MAGIC:
        raise CacheError(f"{path} is not a grid cache")
    (version,) = struct.unpack("<I", take(4))
    if version != CACHE_VERSION:
        raise CacheError(f"unsupported grid cache version {version}")
    fp = take(32).hex()
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise CacheError("grid cache fingerprint does not match the requested configuration")
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(meta_len))
    except ValueError as exc:
        raise CacheError("corrupt grid cache header") from exc
    M, L, c = meta["M"], meta["L"], meta["channels"]
    protos = []
    for _ in range(L):
        level, m = struct.unpack("<II", take(8))
        centroids = floats(m * level, (m, level))
        order = np.frombuffer(take(8 * m), dtype="<i8").astype(np.int64)
        (seed,) = struct.unpack("<q", take(8))
        protos.append(PrototypeSet(level, centroids, order, seed))
    grids = []
    for _ in range(meta["n_graphs"]):
        (label,) = struct.unpack("<q", take(8))
        grids.append(AlignedGrid(floats(M * c, (M, c)), floats(M * M, (M, M)),
                                 floats(M * M, (M, M)), label))
    if pos != len(data):
        raise CacheError(f"trailing bytes in grid cache {path}")
    return GridSet(grids, protos, fp, M, L, meta["seed"])


def load_or_prepare(cache_path, dataset: GraphDataset, M: int, L: int, seed: int,
                    fit_indices=None, threads: int = 1, db_mats=None) -> tuple[GridSet, bool]:
    """Return ``(gridset, cache_hit)``; builds and writes the cache on a miss."""
    fp = fingerprint(dataset, M, L, seed, fit_indices)
    if cache_path is not None:
        try:
            return read_grid_cache(cache_path, fp), True
        except CacheError:
            pass
    gridset = prepare_grids(dataset, M, L, seed, fit_indices, db_mats=db_mats, threads=threads)
    if cache_path is not None:
        write_grid_cache(cache_path, gridset)
    return gridset, False
