"""Prototype construction: hub-seeded clustering, FPS seeding, and mixing.

Both strategies share the same single-pass clustering step: every point of a
class joins its most similar seed, and each seed's prototype is the unit-
normalized mean of its members. They differ only in where the seeds come
from (mined hubs vs. greedy farthest-point sampling), which is what the
mixing helper trades off.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import ClassMask, FeatureMatrix, SeededRng, UNIT_NORM_ATOL
from .hubs import HubSet


@dataclass(frozen=True)
class PrototypeSet:
    """Prototype rows with class labels and a provenance tag per row.

    Provenance records which seed produced a prototype: ``hub:<i>`` or
    ``fps:<i>`` with i the support row index of the seed, or ``mean`` for a
    plain class mean. Rows are grouped by class in ascending class order.
    """

    features: np.ndarray
    labels: np.ndarray
    provenance: tuple[str, ...]

    def __post_init__(self) -> None:
        feats = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if feats.ndim != 2:
            raise ValueError("prototype features must be 2-D")
        if labels.shape != (feats.shape[0],):
            raise ValueError("one label per prototype row required")
        if len(self.provenance) != feats.shape[0]:
            raise ValueError("one provenance tag per prototype row required")
        if feats.size:
            norms = np.linalg.norm(feats, axis=1)
            if not np.all(np.abs(norms - 1.0) <= UNIT_NORM_ATOL):
                raise ValueError("prototype rows must be unit vectors")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_ids(self) -> np.ndarray:
        return np.unique(self.labels)

    def rows_for(self, class_id: int) -> np.ndarray:
        """Row positions of the prototypes for one class, in stored order."""
        return np.flatnonzero(self.labels == class_id)


def _assign_to_seeds(points: np.ndarray, seed_feats: np.ndarray, seed_ids: np.ndarray) -> np.ndarray:
    """Most-similar seed per point; ties go to the smaller seed id."""
    order = np.argsort(seed_ids, kind="stable")
    sims = points @ seed_feats[order].T
    pick = np.argmax(sims, axis=1)  # argmax returns the first maximum
    return order[pick]


def _seed_prototypes(
    feats: np.ndarray,
    pool: np.ndarray,
    seed_idx: np.ndarray,
    class_id: int,
    tag: str,
) -> tuple[list[np.ndarray], list[int], list[str]]:
    """Cluster one class pool around its seeds and average each cluster."""
    pts = feats[pool]
    assign = _assign_to_seeds(pts, feats[seed_idx], seed_idx)
    rows: list[np.ndarray] = []
    labels: list[int] = []
    prov: list[str] = []
    for j, seed in enumerate(seed_idx):
        members = pts[assign == j]
        if members.shape[0] == 0:
            proto = feats[seed]
        else:
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm == 0.0:
                raise ValueError(
                    f"degenerate prototype: cluster around point {int(seed)} has zero mean"
                )
            proto = mean / norm
        rows.append(proto)
        labels.append(class_id)
        prov.append(f"{tag}:{int(seed)}")
    return rows, labels, prov


def cluster_hub_prototypes(
    support: FeatureMatrix,
    mask: ClassMask,
    hubs: Mapping[int, HubSet],
) -> PrototypeSet:
    """Build one prototype per hub by clustering class points around hubs.

    Every point of class c is assigned to the most similar of that class's
    hubs (ties to the lower hub index) and each hub's prototype is the
    normalized mean of its cluster; a hub with no members keeps its own
    feature vector. Output rows are grouped by class ascending and follow
    hub-set order within a class.
    """
    if mask.size != support.rows:
        raise ValueError("mask length does not match support rows")
    labels = mask.labels
    present = np.unique(labels)
    for c in present:
        hs = hubs.get(int(c))
        if hs is None or hs.count == 0:
            raise ValueError(f"empty hub set for present class {int(c)}")
    rows: list[np.ndarray] = []
    out_labels: list[int] = []
    prov: list[str] = []
    for c in sorted(int(c) for c in hubs):
        hs = hubs[c]
        if hs.count == 0:
            continue
        pool = np.flatnonzero(labels == c)
        if pool.size == 0:
            raise ValueError(f"hub set given for class {c} but no support points carry it")
        if not np.all(labels[hs.indices] == c):
            raise ValueError(f"hub labels do not match class {c}")
        r, l, p = _seed_prototypes(support.data, pool, hs.indices, c, "hub")
        rows.extend(r)
        out_labels.extend(l)
        prov.extend(p)
    return PrototypeSet(np.vstack(rows), np.asarray(out_labels), tuple(prov))


def fps_prototypes(support: FeatureMatrix, mask: ClassMask, eta: int) -> PrototypeSet:
    """Farthest-point-sampled prototypes, the query-agnostic baseline.

    Per class, up to eta seeds are picked greedily under the cosine distance
    1 - cos: the first seed is the point least similar to the class mean and
    each next seed maximizes the minimum distance to the seeds so far (ties
    to the lower support index). The class pool is then clustered around the
    seeds exactly as in :func:`cluster_hub_prototypes`. With eta at or above
    the class size every point becomes a seed.
    """
    if eta < 1:
        raise ValueError(f"eta must be positive, got {eta}")
    if mask.size != support.rows:
        raise ValueError("mask length does not match support rows")
    labels = mask.labels
    rows: list[np.ndarray] = []
    out_labels: list[int] = []
    prov: list[str] = []
    for c in np.unique(labels):
        pool = np.flatnonzero(labels == c)
        pts = support.data[pool]
        n_seed = min(eta, pool.size)
        centroid = pts.mean(axis=0)
        cnorm = np.linalg.norm(centroid)
        to_centroid = pts @ (centroid / cnorm) if cnorm > 0.0 else np.zeros(pool.size)
        seeds = [int(np.argmin(to_centroid))]
        min_dist = 1.0 - pts @ pts[seeds[0]]
        min_dist[seeds[0]] = -1.0  # never re-pick a chosen seed
        while len(seeds) < n_seed:
            nxt = int(np.argmax(min_dist))
            seeds.append(nxt)
            min_dist = np.minimum(min_dist, 1.0 - pts @ pts[nxt])
            min_dist[nxt] = -1.0
        seed_idx = pool[np.asarray(seeds, dtype=np.int64)]
        r, l, p = _seed_prototypes(support.data, pool, seed_idx, int(c), "fps")
        rows.extend(r)
        out_labels.extend(l)
        prov.extend(p)
    return PrototypeSet(np.vstack(rows), np.asarray(out_labels), tuple(prov))


def mix_prototypes(
    hub_set: PrototypeSet,
    fps_set: PrototypeSet,
    hub_ratio: float,
    rng: SeededRng,
) -> PrototypeSet:
    """Blend two prototype sets class by class at a given hub fraction.

    For a class with m prototypes, round(hub_ratio * m) rows are drawn
    without replacement from ``hub_set`` and the remaining m - n come from
    ``fps_set``; draws use ``rng`` and chosen rows keep their original order,
    so ratio 1.0 returns ``hub_set`` unchanged and 0.0 returns ``fps_set``.
    Both inputs must cover the same classes with the same per-class counts.
    """
    if not 0.0 <= hub_ratio <= 1.0:
        raise ValueError(f"hub_ratio must lie in [0, 1], got {hub_ratio}")
    h_classes = hub_set.class_ids()
    f_classes = fps_set.class_ids()
    if not np.array_equal(h_classes, f_classes):
        raise ValueError("class coverage mismatch between prototype sets")
    g = rng.generator()
    rows: list[np.ndarray] = []
    labels: list[int] = []
    prov: list[str] = []
    for c in h_classes:
        h_pos = hub_set.rows_for(int(c))
        f_pos = fps_set.rows_for(int(c))
        if h_pos.size != f_pos.size:
            raise ValueError(
                f"per-class count mismatch for class {int(c)}: "
                f"{h_pos.size} hub vs {f_pos.size} fps prototypes"
            )
        m = h_pos.size
        n_hub = int(np.floor(hub_ratio * m + 0.5))
        take_h = np.sort(g.choice(m, size=n_hub, replace=False))
        take_f = np.sort(g.choice(m, size=m - n_hub, replace=False))
        for pos in h_pos[take_h]:
            rows.append(hub_set.features[pos])
            labels.append(int(c))
            prov.append(hub_set.provenance[pos])
        for pos in f_pos[take_f]:
            rows.append(fps_set.features[pos])
            labels.append(int(c))
            prov.append(fps_set.provenance[pos])
    return PrototypeSet(np.vstack(rows), np.asarray(labels), tuple(prov))
