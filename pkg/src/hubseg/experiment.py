"""Episodic experiment harness: paired strategy runs and the metrics file.

Every episode index maps to one generated episode that all strategies see,
so per-episode mIoU values are paired across strategies and a later
significance test on the differences is meaningful. The whole report is a
pure function of (episode config, parameters, strategy list, episode
count); wall-clock time is carried for logging but excluded from equality
and never written to the metrics file.

Metrics file format
-------------------
A text file with a header row, one CSV row per (episode, strategy), and an
aggregate footer::

    episode_index,strategy,miou
    0,hub,0.9375
    ...
    [aggregate]
    strategy,count,mean,std

Floats are written with repr (shortest round-trip form), so identical runs
produce byte-identical files.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ClassMask, Episode, SeededRng, query_points, support_points
from .episodes import EpisodeConfig, atomic_write_text, generate_synthetic_episode
from .hubs import mine_class_hubs, hubness_scores, select_top_hubs
from .prototypes import PrototypeSet, cluster_hub_prototypes, fps_prototypes, mix_prototypes
from .refine import build_anchors, build_global_graph, optimize_embeddings, purity_table
from .segmentation import class_logits, miou, predict_mask

# Mixing draws its randomness from a stream id that cannot collide with the
# per-episode generation streams (which use the episode index directly).
_MIX_STREAM_BASE = 2**32


@dataclass(frozen=True)
class PipelineParams:
    """Knobs shared by every strategy; defaults follow the reference setup."""

    k: int = 5
    eta: int = 100
    gamma: float = 0.6
    tau: float = 0.1
    tau_seg: float = 0.1
    lam: float = 0.1
    epsilon: float = 1e-6
    opt_steps: int = 50
    opt_step_size: float = 0.1

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.eta < 1:
            raise ValueError("eta must be at least 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.tau <= 0 or self.tau_seg <= 0:
            raise ValueError("temperatures must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.opt_steps < 0:
            raise ValueError("opt_steps must be non-negative")
        if self.opt_step_size <= 0:
            raise ValueError("opt_step_size must be positive")


def parse_strategy(name: str) -> tuple[str, float | None]:
    """Split a strategy string into (kind, mix ratio).

    Known strategies: ``fps``, ``hub``, ``hub+pdo`` and ``mixed:<r>`` with a
    hub fraction r in [0, 1].
    """
    if name in ("fps", "hub", "hub+pdo"):
        return name, None
    if name.startswith("mixed:"):
        try:
            ratio = float(name.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"unknown strategy: {name!r}") from None
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"mix ratio must lie in [0, 1], got {ratio}")
        return "mixed", ratio
    raise ValueError(f"unknown strategy: {name!r}")


@dataclass(frozen=True)
class RefineDiagnostics:
    """Per-episode bookkeeping for the hub+pdo strategy."""

    episode_index: int
    bad_hub_count: int
    proxy_before: float
    proxy_after: float
    loss_before: float
    loss_after: float


@dataclass(frozen=True)
class StrategyAggregate:
    count: int
    mean: float
    std: float


@dataclass(frozen=True)
class MetricsReport:
    """All per-episode scores plus aggregates for one run."""

    config: EpisodeConfig
    params: PipelineParams
    strategies: tuple[str, ...]
    episode_count: int
    miou_per_episode: dict[str, tuple[float, ...]]
    aggregates: dict[str, StrategyAggregate]
    refine_diagnostics: tuple[RefineDiagnostics, ...]
    wall_clock_seconds: float = field(compare=False, default=0.0)


def _prototypes_for(
    e: Episode,
    strategy: str,
    ratio: float | None,
    params: PipelineParams,
    episode_index: int,
    master_seed: int,
) -> tuple[PrototypeSet, RefineDiagnostics | None]:
    sf, s_labels, _ = support_points(e)
    mask = ClassMask(s_labels)
    if strategy == "fps":
        return fps_prototypes(sf, mask, params.eta), None
    hubs = mine_class_hubs(e, params.k, params.eta, params.epsilon)
    protos = cluster_hub_prototypes(sf, mask, hubs)
    if strategy == "hub":
        return protos, None
    if strategy == "mixed":
        fps = fps_prototypes(sf, mask, params.eta)
        rng = SeededRng(master_seed, _MIX_STREAM_BASE + episode_index)
        return mix_prototypes(protos, fps, ratio, rng), None
    # hub+pdo: purity accounting on the full episode graph, then descent.
    graph = build_global_graph(e, params.k)
    scores = hubness_scores(graph, params.epsilon)
    graph_hubs = select_top_hubs(scores, params.eta)
    table = purity_table(graph, graph_hubs, mask, params.gamma, params.epsilon)
    anchors = build_anchors(protos, table, sf, mask)
    result = optimize_embeddings(
        anchors, protos, params.tau, params.opt_steps, params.opt_step_size
    )
    diag = RefineDiagnostics(
        episode_index=episode_index,
        bad_hub_count=int(table.bad.sum()),
        proxy_before=float(result.proxy_trajectory[0]),
        proxy_after=float(result.proxy_trajectory[-1]),
        loss_before=float(result.loss_trajectory[0]),
        loss_after=float(result.loss_trajectory[-1]),
    )
    return result.prototypes, diag


def evaluate_episode(
    e: Episode,
    strategy: str,
    params: PipelineParams,
    episode_index: int = 0,
    master_seed: int = 0,
) -> tuple[float, RefineDiagnostics | None]:
    """mIoU of one strategy on one episode (query clouds pooled)."""
    kind, ratio = parse_strategy(strategy)
    protos, diag = _prototypes_for(e, kind, ratio, params, episode_index, master_seed)
    qf, q_labels = query_points(e)
    logits = class_logits(qf, protos, params.tau_seg)
    pred = predict_mask(logits)
    report = miou(pred, ClassMask(q_labels), e.n_way + 1)
    return report.miou, diag


def run_experiment(
    cfg: EpisodeConfig,
    episodes: int,
    strategies: tuple[str, ...] | list[str],
    params: PipelineParams = PipelineParams(),
) -> MetricsReport:
    """Generate ``episodes`` tasks from cfg.seed and score every strategy.

    Episode i is drawn from stream i of the master seed, identically for
    all strategies. ``episodes=0`` yields an empty report.
    """
    if episodes < 0:
        raise ValueError("episodes must be non-negative")
    strategies = tuple(strategies)
    if not strategies:
        raise ValueError("at least one strategy is required")
    for s in strategies:
        parse_strategy(s)
    if len(set(strategies)) != len(strategies):
        raise ValueError("duplicate strategy in list")

    start = time.perf_counter()
    per: dict[str, list[float]] = {s: [] for s in strategies}
    diags: list[RefineDiagnostics] = []
    for i in range(episodes):
        e = generate_synthetic_episode(cfg, SeededRng(cfg.seed, i))
        for s in strategies:
            value, diag = evaluate_episode(e, s, params, episode_index=i, master_seed=cfg.seed)
            per[s].append(value)
            if diag is not None:
                diags.append(diag)
    aggregates = {}
    for s in strategies:
        vals = np.asarray(per[s])
        if vals.size == 0:
            aggregates[s] = StrategyAggregate(0, float("nan"), float("nan"))
        else:
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            aggregates[s] = StrategyAggregate(int(vals.size), float(vals.mean()), std)
    return MetricsReport(
        config=cfg,
        params=params,
        strategies=strategies,
        episode_count=episodes,
        miou_per_episode={s: tuple(v) for s, v in per.items()},
        aggregates=aggregates,
        refine_diagnostics=tuple(diags),
        wall_clock_seconds=time.perf_counter() - start,
    )


def render_metrics(report: MetricsReport) -> str:
    """The metrics file body for a report; see the module docstring."""
    lines = ["episode_index,strategy,miou"]
    for i in range(report.episode_count):
        for s in report.strategies:
            lines.append(f"{i},{s},{report.miou_per_episode[s][i]!r}")
    lines.append("[aggregate]")
    lines.append("strategy,count,mean,std")
    for s in report.strategies:
        agg = report.aggregates[s]
        lines.append(f"{s},{agg.count},{agg.mean!r},{agg.std!r}")
    return "\n".join(lines) + "\n"


def write_metrics(report: MetricsReport, path: str) -> None:
    atomic_write_text(path, render_metrics(report))
