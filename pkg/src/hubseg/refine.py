"""Hub purity accounting and contrastive refinement of embeddings.

On a graph whose centers carry ground-truth labels, each hub's traffic can
be split into same-class and cross-class memberships. The purity ratio
t(h) / s(h) flags hubs that mostly serve foreign-class centers ("bad hubs");
those are pulled back toward their own class by a weighted contrastive loss
over (anchor, prototype) pairs, with per-anchor weights that grow as purity
falls. The loss exposes analytic gradients so plain gradient descent on the
raw features is enough.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassMask, Episode, FeatureMatrix, query_points, support_points, validate_episode
from .hubs import DEFAULT_EPSILON, HubSet, KnnGraph, build_bipartite_knn, hub_counts
from .prototypes import PrototypeSet


def build_global_graph(e: Episode, k: int) -> KnnGraph:
    """kNN graph over the whole episode for purity accounting.

    Centers are all query points followed by all support points (labels
    attached, so center_count = query + support point totals); neighbors are
    the support points alone. Support centers are excluded from their own
    lists, which can leave a lone support point with an empty list.
    """
    report = validate_episode(e)
    if not report.ok:
        raise ValueError("invalid episode: " + "; ".join(report.violations))
    qf, q_labels = query_points(e)
    sf, s_labels, _ = support_points(e)
    centers = FeatureMatrix(
        np.vstack([qf.data, sf.data]),
        normalized=qf.normalized and sf.normalized,
    )
    self_map = np.concatenate(
        [np.full(qf.rows, -1, dtype=np.int64), np.arange(sf.rows, dtype=np.int64)]
    )
    g = build_bipartite_knn(centers, sf, k, exclude_self=True, self_map=self_map)
    labels = np.concatenate([q_labels, s_labels])
    labels.setflags(write=False)
    return KnnGraph(
        k=g.k,
        center_count=g.center_count,
        neighbor_count=g.neighbor_count,
        adjacency=g.adjacency,
        center_labels=labels,
    )


@dataclass(frozen=True)
class PurityTable:
    """Per-hub traffic split: total score, same-class part, purity, badness.

    ``link_counts`` and ``same_class`` are exact integers with
    same_class <= link_counts; ``scores`` adds the epsilon used for hubness,
    and purity = same_class / scores so it is defined even for unvisited
    hubs. A hub is bad when its purity falls below gamma.
    """

    indices: np.ndarray
    link_counts: np.ndarray
    same_class: np.ndarray
    scores: np.ndarray
    purity: np.ndarray
    bad: np.ndarray
    gamma: float
    epsilon: float

    @property
    def bad_indices(self) -> np.ndarray:
        return self.indices[self.bad]

    def _pos(self, hub_index: int) -> int:
        pos = np.flatnonzero(self.indices == hub_index)
        if pos.size == 0:
            raise KeyError(f"hub {hub_index} not in purity table")
        return int(pos[0])

    def purity_of(self, hub_index: int) -> float:
        return float(self.purity[self._pos(hub_index)])

    def is_bad(self, hub_index: int) -> bool:
        return bool(self.bad[self._pos(hub_index)])


def purity_table(
    g: KnnGraph,
    hubs: HubSet,
    neighbor_labels: ClassMask,
    gamma: float,
    epsilon: float = DEFAULT_EPSILON,
) -> PurityTable:
    """Score hub purity on a labeled graph.

    For each hub h, t(h) counts the centers whose kNN lists contain h and
    whose label equals h's own, and s(h) is the full membership count plus
    epsilon. Purity is t / s and hubs with purity below gamma are marked bad.
    The epsilon must match the one used to score hubness so both sides of
    the ratio live on the same scale.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if g.center_labels is None:
        raise ValueError("purity needs a graph with center labels attached")
    if neighbor_labels.size != g.neighbor_count:
        raise ValueError("neighbor label count does not match the graph")
    if hubs.count and (hubs.indices.min() < 0 or hubs.indices.max() >= g.neighbor_count):
        raise ValueError("hub indices outside the neighbor range")

    counts = hub_counts(g)
    if g.center_count and any(len(r) for r in g.adjacency):
        flat = np.concatenate(g.adjacency)
        lens = np.fromiter((len(r) for r in g.adjacency), dtype=np.int64, count=g.center_count)
        owner_labels = np.repeat(g.center_labels, lens)
        matched = flat[owner_labels == neighbor_labels.labels[flat]]
        same = np.bincount(matched, minlength=g.neighbor_count).astype(np.int64)
    else:
        same = np.zeros(g.neighbor_count, dtype=np.int64)

    idx = hubs.indices
    link = counts[idx]
    t = same[idx]
    s = link.astype(np.float64) + epsilon
    purity = t / s
    bad = purity < gamma
    for arr in (link, t, s, purity, bad):
        arr.setflags(write=False)
    return PurityTable(
        indices=idx,
        link_counts=link,
        same_class=t,
        scores=s,
        purity=purity,
        bad=bad,
        gamma=gamma,
        epsilon=epsilon,
    )


def reweight_factor(table: PurityTable, hub_index: int | None = None) -> float:
    """Anchor weight: 1 for prototype anchors, 1 - purity for bad hubs.

    ``hub_index`` of None denotes a foreground-prototype anchor. A hub index
    must refer to a hub the table marks bad; low-purity hubs approach weight
    1 and near-threshold hubs contribute less.
    """
    if hub_index is None:
        return 1.0
    if not table.is_bad(hub_index):
        raise ValueError(f"hub {hub_index} is not marked bad; only bad hubs are anchors")
    return 1.0 - table.purity_of(hub_index)


@dataclass(frozen=True)
class AnchorSet:
    """Anchor rows for the contrastive loss: features, labels, weights.

    Assembled by :func:`build_anchors` as foreground prototypes (weight 1)
    followed by bad hubs (weight 1 - purity); ``is_bad_hub`` marks the hub
    rows so optimization can track them separately.
    """

    features: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    is_bad_hub: np.ndarray

    def __post_init__(self) -> None:
        feats = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        weights = np.array(self.weights, dtype=np.float64, copy=True)
        flags = np.array(self.is_bad_hub, dtype=bool, copy=True)
        n = feats.shape[0]
        if feats.ndim != 2:
            raise ValueError("anchor features must be 2-D")
        if labels.shape != (n,) or weights.shape != (n,) or flags.shape != (n,):
            raise ValueError("labels, weights and is_bad_hub must match the anchor count")
        if n == 0:
            raise ValueError("anchor set is empty")
        if np.any(weights <= 0.0):
            raise ValueError("anchor weights must be positive")
        for a in (feats, labels, weights, flags):
            a.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "is_bad_hub", flags)

    @property
    def count(self) -> int:
        return self.features.shape[0]


def build_anchors(
    prototypes: PrototypeSet,
    table: PurityTable,
    support: FeatureMatrix,
    support_mask: ClassMask,
) -> AnchorSet:
    """Foreground prototypes plus bad hubs, with their loss weights."""
    if support_mask.size != support.rows:
        raise ValueError("mask length does not match support rows")
    fg = np.flatnonzero(prototypes.labels > 0)
    if fg.size == 0:
        raise ValueError("prototype set has no foreground rows")
    bad_idx = table.bad_indices
    feats = [prototypes.features[fg]]
    labels = [prototypes.labels[fg]]
    weights = [np.ones(fg.size)]
    flags = [np.zeros(fg.size, dtype=bool)]
    if bad_idx.size:
        feats.append(support.data[bad_idx])
        labels.append(support_mask.labels[bad_idx])
        weights.append(1.0 - table.purity[table.bad])
        flags.append(np.ones(bad_idx.size, dtype=bool))
    return AnchorSet(
        features=np.vstack(feats),
        labels=np.concatenate(labels),
        weights=np.concatenate(weights),
        is_bad_hub=np.concatenate(flags),
    )


@dataclass(frozen=True)
class PcLossResult:
    loss: float
    grad_anchors: np.ndarray
    grad_prototypes: np.ndarray


def _pc_loss_raw(
    a: np.ndarray,
    a_labels: np.ndarray,
    weights: np.ndarray,
    p: np.ndarray,
    p_labels: np.ndarray,
    tau: float,
    want_grads: bool = True,
) -> tuple[float, np.ndarray | None, np.ndarray | None]:
    """Loss and gradients on raw arrays; all validation lives in callers."""
    pos = a_labels[:, None] == p_labels[None, :]
    if not pos.any(axis=1).all():
        missing = int(a_labels[~pos.any(axis=1)][0])
        raise ValueError(f"isolated anchor class {missing}: no prototype shares its label")

    z = (a @ p.T) / tau
    shift = z.max(axis=1, keepdims=True)
    ez = np.exp(z - shift)
    s_pos = np.where(pos, ez, 0.0).sum(axis=1)
    s_neg = np.where(pos, 0.0, ez).sum(axis=1)

    # -log(w S+ / (w S+ + S-)) == log1p(S- / (w S+)); the shift cancels.
    loss = float(np.log1p(s_neg / (weights * s_pos)).mean())
    if not want_grads:
        return loss, None, None

    denom = weights * s_pos + s_neg
    coef_pos = -ez * (s_neg / (s_pos * denom))[:, None]
    coef_neg = ez / denom[:, None]
    coef = np.where(pos, coef_pos, coef_neg) / a.shape[0]
    # No negatives: the term is identically zero, make the gradient exact.
    coef[s_neg == 0.0] = 0.0

    grad_a = (coef @ p) / tau
    grad_p = (coef.T @ a) / tau
    return loss, grad_a, grad_p


def pc_loss(anchors: AnchorSet, prototypes: PrototypeSet, tau: float) -> PcLossResult:
    """Weighted contrastive loss over anchors against all prototypes.

    For anchor a with weight w, positives are the prototypes sharing a's
    label and negatives are the rest; with U+/- the summed exp(sim / tau)
    over each group, the per-anchor term is -log(w U+ / (w U+ + U-)) and the
    loss is the mean over anchors. Weights are treated as constants, so the
    returned gradients are exactly the derivatives with respect to the raw
    anchor and prototype rows.

    Per-anchor max-shifted exponentials keep the sums finite for small tau.
    An anchor with no negatives contributes exactly zero loss and gradient;
    an anchor whose label has no prototype is rejected ("isolated anchor
    class") because its positive sum would be empty.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if anchors.features.shape[1] != prototypes.features.shape[1]:
        raise ValueError("anchor and prototype dimensions differ")
    if prototypes.count == 0:
        raise ValueError("prototype set is empty")
    loss, grad_a, grad_p = _pc_loss_raw(
        anchors.features,
        anchors.labels,
        anchors.weights,
        prototypes.features,
        prototypes.labels,
        tau,
    )
    return PcLossResult(loss=loss, grad_anchors=grad_a, grad_prototypes=grad_p)


def _class_centroids(features: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    out: dict[int, np.ndarray] = {}
    for c in np.unique(labels):
        mean = features[labels == c].mean(axis=0)
        norm = np.linalg.norm(mean)
        out[int(c)] = mean / norm if norm > 0.0 else mean
    return out


def _bad_hub_proxy(a, a_labels, is_bad, p, p_labels) -> float:
    """Mean cosine of bad-hub anchors to their own class's prototype centroid."""
    if not np.any(is_bad):
        return float("nan")
    cents = _class_centroids(p, p_labels)
    idx = np.flatnonzero(is_bad)
    sims = [float(a[i] @ cents[int(a_labels[i])]) for i in idx]
    return float(np.mean(sims))


@dataclass(frozen=True)
class OptimizeResult:
    """Updated anchors and prototypes plus per-step trajectories.

    Trajectories have ``steps + 1`` entries: the state before each step and
    the final state. ``proxy_trajectory`` tracks the mean cosine of bad-hub
    anchors to the unit-normalized mean of their class's current prototypes
    (NaN when the anchor set has no bad hubs).
    """

    anchors: AnchorSet
    prototypes: PrototypeSet
    loss_trajectory: np.ndarray
    proxy_trajectory: np.ndarray


def optimize_embeddings(
    anchors: AnchorSet,
    prototypes: PrototypeSet,
    tau: float,
    steps: int,
    step_size: float,
) -> OptimizeResult:
    """Plain gradient descent on anchor and prototype rows.

    Every step takes one descent move on both matrices and renormalizes
    rows to unit length. ``steps=0`` evaluates once and returns the inputs
    unchanged. Weights ride along as constants.
    """
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    if step_size <= 0:
        raise ValueError(f"step_size must be positive, got {step_size}")

    a = anchors.features.copy()
    p = prototypes.features.copy()
    losses: list[float] = []
    proxies: list[float] = []

    def record(loss: float) -> None:
        losses.append(loss)
        proxies.append(_bad_hub_proxy(a, anchors.labels, anchors.is_bad_hub, p, prototypes.labels))

    cur_anchors = anchors
    cur_protos = prototypes
    for _ in range(steps):
        res = pc_loss(cur_anchors, cur_protos, tau)
        record(res.loss)
        a = a - step_size * res.grad_anchors
        p = p - step_size * res.grad_prototypes
        for m in (a, p):
            norms = np.linalg.norm(m, axis=1)
            if np.any(norms == 0.0):
                raise ValueError("degenerate point: a row collapsed to zero norm")
            m /= norms[:, None]
        cur_anchors = AnchorSet(a, anchors.labels, anchors.weights, anchors.is_bad_hub)
        cur_protos = PrototypeSet(p, prototypes.labels, prototypes.provenance)
    final = pc_loss(cur_anchors, cur_protos, tau)
    record(final.loss)
    return OptimizeResult(
        anchors=cur_anchors,
        prototypes=cur_protos,
        loss_trajectory=np.asarray(losses),
        proxy_trajectory=np.asarray(proxies),
    )


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    worst_case: int
    cases: int


def gradient_check(
    master_seed: int,
    cases: int,
    h: float = 1e-5,
    corrupt: float = 0.0,
) -> GradCheckResult:
    """Compare analytic loss gradients against central finite differences.

    Random small instances (anchors <= 20, prototypes <= 30, D <= 8, tau in
    {0.1, 1.0}) are drawn per case from ``default_rng([master_seed, case])``.
    Every coordinate of both gradient matrices is checked with central
    differences of the same loss routine; the error metric is
    |analytic - fd| / max(1, |analytic|, |fd|). ``corrupt`` adds a bias to
    the analytic gradients and exists so the check can be shown to fail.
    """
    if cases < 1:
        raise ValueError("cases must be positive")
    worst = 0.0
    worst_case = 0
    for case in range(cases):
        g = np.random.default_rng([master_seed, case])
        n_a = int(g.integers(1, 21))
        dim = int(g.integers(2, 9))
        tau = float(g.choice([0.1, 1.0]))
        n_classes = int(g.integers(2, 4))
        # at least one prototype per class, so no anchor class is isolated
        n_p = int(g.integers(n_classes, 31))
        p_labels = np.concatenate(
            [np.arange(n_classes), g.integers(0, n_classes, n_p - n_classes)]
        )
        a_labels = g.integers(0, n_classes, n_a)

        def unit(rows: int) -> np.ndarray:
            m = g.standard_normal((rows, dim))
            return m / np.linalg.norm(m, axis=1, keepdims=True)

        a_feats = unit(n_a)
        p_feats = unit(n_p)
        weights = g.uniform(0.2, 1.0, n_a)

        _, grad_a, grad_p = _pc_loss_raw(a_feats, a_labels, weights, p_feats, p_labels, tau)
        grad_a = grad_a + corrupt
        grad_p = grad_p + corrupt

        def loss_at(af: np.ndarray, pf: np.ndarray) -> float:
            return _pc_loss_raw(af, a_labels, weights, pf, p_labels, tau, want_grads=False)[0]

        for mat, grad, other_first in ((a_feats, grad_a, True), (p_feats, grad_p, False)):
            for i in range(mat.shape[0]):
                for j in range(mat.shape[1]):
                    plus = mat.copy()
                    minus = mat.copy()
                    plus[i, j] += h
                    minus[i, j] -= h
                    if other_first:
                        fd = (loss_at(plus, p_feats) - loss_at(minus, p_feats)) / (2 * h)
                    else:
                        fd = (loss_at(a_feats, plus) - loss_at(a_feats, minus)) / (2 * h)
                    an = float(grad[i, j])
                    err = abs(an - fd) / max(1.0, abs(an), abs(fd))
                    if err > worst:
                        worst = err
                        worst_case = case
    return GradCheckResult(max_rel_error=worst, worst_case=worst_case, cases=cases)
