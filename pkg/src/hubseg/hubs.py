"""Bipartite k-nearest-neighbor graphs, hubness scoring, and hub selection.

A hub is a support point that appears in the kNN lists of unusually many
centers. Scores count kNN-list memberships across all centers, plus a small
epsilon that keeps later purity ratios finite; with integer counts underneath,
the total membership mass is conserved exactly:
sum(counts) == n_centers * min(k, n_neighbors) when no self-edges are removed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import Episode, FeatureMatrix, query_points, support_points, validate_episode

DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class KnnGraph:
    """Directed bipartite graph from centers to their k nearest neighbors.

    ``adjacency[i]`` holds neighbor indices for center i, ordered by
    similarity descending with ties broken toward the lower neighbor index.
    Rows normally have min(k, n_neighbors) entries; a center excluded from
    its own list can have one fewer. ``center_labels`` is optional and only
    attached when the graph is used for purity accounting.
    """

    k: int
    center_count: int
    neighbor_count: int
    adjacency: tuple[np.ndarray, ...]
    center_labels: np.ndarray | None = None


@dataclass(frozen=True)
class HubSet:
    """Selected hub indices with their scores, in selection order."""

    indices: np.ndarray
    scores: np.ndarray
    eta: int

    def __post_init__(self) -> None:
        idx = np.array(self.indices, dtype=np.int64, copy=True)
        sc = np.array(self.scores, dtype=np.float64, copy=True)
        if idx.ndim != 1 or sc.shape != idx.shape:
            raise ValueError("indices and scores must be matching 1-D arrays")
        idx.setflags(write=False)
        sc.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "scores", sc)

    @property
    def count(self) -> int:
        return self.indices.shape[0]


def build_bipartite_knn(
    centers: FeatureMatrix,
    neighbors: FeatureMatrix,
    k: int,
    exclude_self: bool = False,
    self_map: np.ndarray | None = None,
) -> KnnGraph:
    """Connect every center to its k most cosine-similar neighbors.

    Parameters
    ----------
    centers, neighbors
        Unit-normalized matrices (the ``normalized`` flag must be set); the
        dot product of rows is then exactly the cosine similarity.
    k
        Neighbors per center; clamped to the neighbor count.
    exclude_self, self_map
        When a center is also present among the neighbors, ``self_map`` gives
        that neighbor index per center (-1 for none) and the self-edge is
        removed before truncation, so affected rows keep up to
        min(k, n_neighbors - 1) entries.

    Ordering within a row is similarity descending; equal similarities keep
    the lower neighbor index first.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if centers.dim != neighbors.dim:
        raise ValueError(
            f"dimension mismatch: centers have D={centers.dim}, neighbors D={neighbors.dim}"
        )
    if not (centers.normalized and neighbors.normalized):
        raise ValueError("both matrices must be unit-normalized")
    if exclude_self:
        if self_map is None:
            raise ValueError("exclude_self requires a self_map")
        self_map = np.asarray(self_map, dtype=np.int64)
        if self_map.shape != (centers.rows,):
            raise ValueError("self_map must have one entry per center")

    sims = centers.data @ neighbors.data.T
    if exclude_self:
        mapped = np.flatnonzero(self_map >= 0)
        sims[mapped, self_map[mapped]] = -np.inf
    # Stable sort on the negated similarities: ties fall back to the original
    # (ascending index) order, and -inf self-edges sink to the end.
    order = np.argsort(-sims, axis=1, kind="stable")

    n_nb = neighbors.rows
    valid = np.full(centers.rows, n_nb, dtype=np.int64)
    if exclude_self:
        valid[self_map >= 0] -= 1
    rows = []
    for i in range(centers.rows):
        take = min(k, int(valid[i]))
        row = order[i, :take].copy()
        row.setflags(write=False)
        rows.append(row)
    return KnnGraph(
        k=k,
        center_count=centers.rows,
        neighbor_count=n_nb,
        adjacency=tuple(rows),
    )


def hub_counts(g: KnnGraph) -> np.ndarray:
    """Exact integer kNN-list membership count per neighbor."""
    if not g.adjacency:
        return np.zeros(g.neighbor_count, dtype=np.int64)
    flat = np.concatenate(g.adjacency) if g.center_count else np.empty(0, dtype=np.int64)
    if flat.size == 0:
        return np.zeros(g.neighbor_count, dtype=np.int64)
    return np.bincount(flat, minlength=g.neighbor_count).astype(np.int64)


def hubness_scores(g: KnnGraph, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Membership count per neighbor plus epsilon, as float64.

    The epsilon keeps scores strictly positive so that purity ratios computed
    against them are always defined.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return hub_counts(g).astype(np.float64) + epsilon


def select_top_hubs(scores: np.ndarray, eta: int) -> HubSet:
    """Take the eta highest-scoring indices, ties toward the lower index."""
    if eta < 1:
        raise ValueError(f"eta must be positive, got {eta}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("scores must be a 1-D array")
    take = min(eta, scores.size)
    # lexsort: last key is primary, so order by score descending, then index.
    order = np.lexsort((np.arange(scores.size), -scores))[:take]
    return HubSet(indices=order, scores=scores[order], eta=eta)


def mine_class_hubs(
    e: Episode,
    k: int,
    eta: int,
    epsilon: float = DEFAULT_EPSILON,
) -> dict[int, HubSet]:
    """Per-class hubs of an episode, scored by query-to-support kNN traffic.

    One bipartite graph is built with all query points as centers and all
    support points as neighbors; hubness is scored globally on that graph and
    only then restricted to each class pool (points labeled c, background
    included as class 0). Indices refer to rows of the concatenated support
    matrix (see :func:`hubseg.core.support_points`).

    With K shots, the eta-point budget is split as evenly as possible across
    shot indices (earlier shots absorb the remainder) and the per-shot picks
    are concatenated in shot order, so every shot contributes hubs instead of
    one dense shot dominating. Per-shot quotas clamp to the pool size.
    """
    report = validate_episode(e)
    if not report.ok:
        raise ValueError("invalid episode: " + "; ".join(report.violations))
    qf, _ = query_points(e)
    sf, s_labels, s_shots = support_points(e)
    g = build_bipartite_knn(qf, sf, k)
    scores = hubness_scores(g, epsilon)

    out: dict[int, HubSet] = {}
    n_shot = e.n_shot
    base, rem = divmod(eta, n_shot)
    for c in range(e.n_way + 1):
        if not np.any(s_labels == c):
            raise ValueError(f"class {c} has no support points")
        picked: list[np.ndarray] = []
        for s in range(n_shot):
            quota = base + (1 if s < rem else 0)
            if quota == 0:
                continue
            pool = np.flatnonzero((s_labels == c) & (s_shots == s))
            if pool.size == 0:
                continue
            sub = select_top_hubs(scores[pool], min(quota, pool.size))
            picked.append(pool[sub.indices])
        idx = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
        out[c] = HubSet(indices=idx, scores=scores[idx], eta=eta)
    return out
