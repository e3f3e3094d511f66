"""Speculative decoding with similarity-relaxed acceptance, at desk scale."""

from .core import (
    ConfigError,
    DegenerateResidual,
    EngineError,
    FeatureVec,
    GridPos,
    LengthMismatch,
    ModelFormatError,
    NonFinite,
    NotAPath,
    ProbDist,
    RngStream,
    RowOutOfRange,
    TokenId,
    TooLarge,
    UnknownWindow,
    VocabExhausted,
    ZeroNormFeature,
    cosine_sim,
    derive_seed,
    residual_dist,
    tvd,
)
from .harness import (
    ExperimentConfig,
    Metrics,
    decode_with_metrics,
    export_similarity_heatmap,
    mc_distribution_test,
    run_experiment,
)
from .models import (
    GridWorldModel,
    LinearDrafter,
    TabularModel,
    TargetEval,
    enumerate_ar_distribution,
    load_model,
    random_tabular_model,
    save_model,
    tempered_table_drafter,
)
from .train import TrainConfig, TrainSample, loss_and_grad, mark_convergent, train_drafter
from .tree import DraftNode, DraftTree, TreeMask, flatten_accepted_path, sample_draft_tree
from .verify import (
    RelaxConfig,
    RelaxedDist,
    SimilaritySets,
    VerifyOutcome,
    build_sets,
    decode_sequence,
    evaluate_tree,
    relax_q,
    verify_cascade,
    verify_vanilla,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateResidual",
    "DraftNode",
    "DraftTree",
    "EngineError",
    "ExperimentConfig",
    "FeatureVec",
    "GridPos",
    "GridWorldModel",
    "LengthMismatch",
    "LinearDrafter",
    "Metrics",
    "ModelFormatError",
    "NonFinite",
    "NotAPath",
    "ProbDist",
    "RelaxConfig",
    "RelaxedDist",
    "RngStream",
    "RowOutOfRange",
    "SimilaritySets",
    "TabularModel",
    "TargetEval",
    "TokenId",
    "TooLarge",
    "TrainConfig",
    "TrainSample",
    "TreeMask",
    "UnknownWindow",
    "VerifyOutcome",
    "VocabExhausted",
    "ZeroNormFeature",
    "build_sets",
    "cosine_sim",
    "decode_sequence",
    "decode_with_metrics",
    "derive_seed",
    "enumerate_ar_distribution",
    "evaluate_tree",
    "export_similarity_heatmap",
    "flatten_accepted_path",
    "load_model",
    "loss_and_grad",
    "mark_convergent",
    "mc_distribution_test",
    "random_tabular_model",
    "relax_q",
    "residual_dist",
    "run_experiment",
    "sample_draft_tree",
    "save_model",
    "tempered_table_drafter",
    "train_drafter",
    "tvd",
    "verify_cascade",
    "verify_vanilla",
]
