"""Cost-aware cascade ranking: train, evaluate, and simulate multi-stage
logistic cascades that jointly optimize ranking accuracy, CPU cost, per-query
result size, and per-query latency, with behavior- and price-based importance
weighting."""

__version__ = "0.1.0"

from .core import (
    CascadeModel,
    Feature,
    FeatureSchema,
    Instance,
    PackedDataset,
    QueryGroup,
    StageAssignment,
    pack_groups,
    stage_cost,
    stage_costs,
    validate_dataset,
)
from .cascade import StageProbs, cascade_probabilities, score_group, stage_probability
from .objective import (
    LossBreakdown,
    ObjectiveConfig,
    expected_cost,
    expected_count,
    expected_latency,
    instance_weight,
    loss_l1,
    loss_l2,
    loss_l3,
    softplus_penalty,
    weighted_nll,
)
from .trainer import (
    GradCheckReport,
    TrainConfig,
    TrainLog,
    gradient_check,
    init_weights,
    load_model,
    save_model,
    train,
)
from .evaluator import (
    EvalReport,
    auc,
    baseline_single_stage,
    baseline_soft_cascade,
    baseline_two_stage,
    evaluate,
)
from .simulator import ServePlan, SimReport, plan, serve_query, simulate
from .datagen import (
    GenConfig,
    default_assignment,
    default_schema,
    generate,
    read_dataset,
    write_dataset,
)
