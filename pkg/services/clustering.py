"""
HLSIRM - Item Clustering

Spectral clustering of item directions on a cosine affinity, with
silhouette and Davies-Bouldin indices computed in cosine-distance space.
"""
import logging
import warnings
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components
from sklearn import metrics
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from models.domain import ClusterResult, ClusterSelection
from utils.errors import ArgumentError, UndefinedMetricError

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12
DEFAULT_K_RANGE = range(2, 8)


def unit_rows(W: np.ndarray) -> np.ndarray:
    """Rows scaled to unit length; zero rows stay zero."""
    W = np.asarray(W, dtype=float)
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    return np.divide(W, norms, out=np.zeros_like(W), where=norms > ZERO_NORM)


def zero_rows(W: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(W, dtype=float), axis=1) <= ZERO_NORM


def cosine_affinity(W: np.ndarray, power: float = 1.0) -> np.ndarray:
    """
    A[i, j] = ((1 + cos(w_i, w_j)) / 2) ** power, diagonal 1.

    Zero rows have cosine 0 with every other row; callers exclude them.
    """
    U = unit_rows(W)
    cos = np.clip(U @ U.T, -1.0, 1.0)
    A = ((1.0 + cos) / 2.0) ** power
    np.fill_diagonal(A, 1.0)
    return A


def spectral_cluster(A: np.ndarray, k: int, seed: int, restarts: int = 20) -> np.ndarray:
    """
    k-means on the row-normalized k smallest eigenvectors of the symmetric
    normalized Laplacian I - D^-1/2 A D^-1/2.
    """
    A = np.asarray(A, dtype=float)
    p = A.shape[0]
    if not 2 <= k < p:
        raise ArgumentError(f"k must satisfy 2 <= k < p={p}, got {k}")

    n_components, _ = connected_components(A > 0, directed=False)
    if n_components > k:
        logger.warning("Affinity graph has %d components, more than k=%d", n_components, k)

    degree = A.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(degree)
    laplacian = np.eye(p) - inv_sqrt[:, None] * A * inv_sqrt[None, :]
    _, vectors = linalg.eigh(laplacian, subset_by_index=[0, k - 1])
    embedding = unit_rows(vectors)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model = KMeans(n_clusters=k, n_init=restarts, random_state=seed)
        return model.fit(embedding).labels_.astype(int)


def silhouette_score(labels: np.ndarray, W: np.ndarray) -> float:
    """Mean silhouette with cosine distance; singleton clusters score 0."""
    labels = np.asarray(labels)
    n_labels = np.unique(labels).size
    if n_labels < 2:
        raise UndefinedMetricError("silhouette is undefined for a single cluster")
    if n_labels >= labels.size:
        return 0.0
    return float(metrics.silhouette_score(unit_rows(W), labels, metric="cosine"))


def davies_bouldin(labels: np.ndarray, W: np.ndarray) -> float:
    """
    Davies-Bouldin index in cosine space. Centroids are the normalized mean
    directions; coincident centroids give infinity.
    """
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise UndefinedMetricError("Davies-Bouldin index is undefined for a single cluster")
    U = unit_rows(W)
    centroids = unit_rows(np.stack([U[labels == c].mean(axis=0) for c in clusters]))
    scatter = np.array([np.mean(1.0 - U[labels == c] @ centroids[i]) for i, c in enumerate(clusters)])
    separation = 1.0 - np.clip(centroids @ centroids.T, -1.0, 1.0)

    worst = np.zeros(clusters.size)
    for i in range(clusters.size):
        ratios = []
        for j in range(clusters.size):
            if i == j:
                continue
            if separation[i, j] <= ZERO_NORM:
                ratios.append(np.inf)
            else:
                ratios.append((scatter[i] + scatter[j]) / separation[i, j])
        worst[i] = max(ratios)
    return float(np.mean(worst))


def distinct_directions(W: np.ndarray, decimals: int = 10) -> int:
    return int(np.unique(np.round(unit_rows(W), decimals), axis=0).shape[0])


def cluster_items(
    W: np.ndarray,
    k: int,
    seed: int,
    restarts: int = 20,
    affinity_power: float = 8.0,
) -> ClusterResult:
    """Cluster the non-zero item vectors into k groups and score the result."""
    W = np.asarray(W, dtype=float)
    excluded = np.flatnonzero(zero_rows(W))
    if excluded.size:
        logger.warning("Items %s have zero magnitude and are left unclustered", excluded.tolist())
    keep = np.flatnonzero(~zero_rows(W))
    Wk = W[keep]

    A = cosine_affinity(Wk, power=affinity_power)
    fitted = spectral_cluster(A, k, seed, restarts=restarts)
    labels = np.full(W.shape[0], -1, dtype=int)
    labels[keep] = fitted

    degenerate = distinct_directions(Wk) < k
    silhouette: Optional[float] = None
    dbi, dbi_infinite = float("inf"), True
    if np.unique(fitted).size >= 2:
        if not degenerate:
            silhouette = silhouette_score(fitted, Wk)
        dbi = davies_bouldin(fitted, Wk)
        dbi_infinite = not np.isfinite(dbi)
    if degenerate:
        logger.warning("Only %d distinct item directions for k=%d; clustering is degenerate", distinct_directions(Wk), k)

    return ClusterResult(
        k=k,
        labels=labels,
        silhouette=silhouette,
        dbi=dbi,
        affinity=A,
        degenerate=degenerate,
        dbi_infinite=dbi_infinite,
        excluded=excluded.tolist(),
    )


def select_k(
    W: np.ndarray,
    k_range: Iterable[int] = DEFAULT_K_RANGE,
    seed: int = 0,
    restarts: int = 20,
    affinity_power: float = 8.0,
    tolerance: float = 0.02,
) -> ClusterSelection:
    """
    Cluster for every k and recommend the silhouette maximizer. Silhouettes
    within ``tolerance`` of the best are ties, and ties go to the smaller k.
    k values outside [2, p-1] are skipped.
    """
    n_items = int((~zero_rows(W)).sum())
    ks = sorted(k for k in k_range if 2 <= k < n_items)
    if not ks:
        raise ArgumentError(f"no admissible k in the requested range for {n_items} non-zero items")
    results = [cluster_items(W, k, seed, restarts=restarts, affinity_power=affinity_power) for k in ks]

    scored = [r for r in results if r.silhouette is not None]
    if scored:
        best = max(r.silhouette for r in scored)
        recommended = min(r.k for r in scored if r.silhouette >= best - tolerance)
    else:
        recommended = ks[0]
    logger.info("Recommended k=%d over %s", recommended, ks)
    return ClusterSelection(results=results, recommended_k=recommended)


def group_cluster_alignment(
    group_positions: np.ndarray,
    item_positions: np.ndarray,
    labels: np.ndarray,
    group_ids: Sequence[str],
    item_ids: Sequence[str],
    closest: int = 3,
) -> List[Dict[str, Any]]:
    """
    One row per (group, cluster): cosine between the group vector and the
    cluster's mean direction, whether it is the group's nearest cluster, and
    the items at the smallest angle to the group vector.
    """
    labels = np.asarray(labels)
    clusters = [c for c in np.unique(labels) if c >= 0]
    U = unit_rows(item_positions)
    centroids = unit_rows(np.stack([U[labels == c].mean(axis=0) for c in clusters]))
    G = unit_rows(group_positions)
    rows = []
    for k, gid in enumerate(group_ids):
        cosines = centroids @ G[k]
        nearest = int(np.argmax(cosines))
        order = np.argsort(-(U @ G[k]), kind="stable")[:closest]
        top = ";".join(item_ids[j] for j in order)
        for c, cluster in enumerate(clusters):
            rows.append({
                "group_id": gid,
                "cluster": int(cluster),
                "cosine": float(cosines[c]),
                "nearest": c == nearest,
                "closest_items": top,
            })
    return rows
