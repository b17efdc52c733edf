"""Few-shot point-set segmentation with hub-based prototypes.

Support points that sit in the kNN lists of many query points (hubs) make
better prototype seeds than query-agnostic sampling when the query
distribution has drifted away from the support set. This package builds the
bipartite kNN machinery, hub mining, prototype construction, a purity-
weighted contrastive refinement of low-quality hubs, segmentation scoring,
and a deterministic episodic harness around synthetic point sets.
"""

__version__ = "0.1.0"

from .core import (
    ClassMask,
    Episode,
    FeatureMatrix,
    LabeledCloud,
    SeededRng,
    ValidationReport,
    normalize_rows,
    query_points,
    support_points,
    validate_episode,
)
from .hubs import (
    HubSet,
    KnnGraph,
    build_bipartite_knn,
    hub_counts,
    hubness_scores,
    mine_class_hubs,
    select_top_hubs,
)
from .prototypes import (
    PrototypeSet,
    cluster_hub_prototypes,
    fps_prototypes,
    mix_prototypes,
)
from .refine import (
    AnchorSet,
    GradCheckResult,
    OptimizeResult,
    PcLossResult,
    PurityTable,
    build_anchors,
    build_global_graph,
    gradient_check,
    optimize_embeddings,
    pc_loss,
    purity_table,
    reweight_factor,
)
from .segmentation import IouReport, ce_loss, class_logits, miou, predict_mask, total_loss
from .episodes import (
    EpisodeConfig,
    EpisodeFormatError,
    SchemaVersionError,
    generate_synthetic_episode,
    read_episode,
    write_episode,
)
from .experiment import (
    MetricsReport,
    PipelineParams,
    RefineDiagnostics,
    StrategyAggregate,
    evaluate_episode,
    run_experiment,
    write_metrics,
)

__all__ = [name for name in dir() if not name.startswith("_")]
