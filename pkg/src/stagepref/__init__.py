"""Stage-aware preference-based reward learning on finite MDPs.

The package studies how much cheaper reward learning becomes when pairwise
queries are aligned with task stages: a staged-chain complexity testbed, a
successor-distance representation trained contrastively from rollouts, a
stage-aware query selector, an online feedback loop on a pick-and-deliver
gridworld, and an HTTP labeling service for human annotators.
"""
from __future__ import annotations

from .complexity import (
    QUERY_MODES,
    SortCountReport,
    SweepResult,
    TabularExperimentConfig,
    binary_insertion_sort,
    count_sort_comparisons,
    run_experiment_sweep,
    run_tabular_pbrl,
)
from .distance import (
    NetworkEnergyModel,
    OccupancyMatrix,
    SuccessorDistance,
    TabularEnergyModel,
    exact_occupancy,
    fit_successor_distance,
    infonce_objective,
    infonce_step,
    learned_distance,
    load_checkpoint,
    sample_positive_batch,
    sample_positive_pair,
    save_checkpoint,
    successor_distance_from_occupancy,
)
from .errors import (
    DegenerateScaleError,
    NumericalError,
    SelectionError,
    StageprefError,
)
from .gridworld import GridWorld
from .loop import (
    LabelMailbox,
    LoopConfig,
    LoopResult,
    make_default_world,
    run_loop,
)
from .manifest import RunManifest, config_hash, finish_manifest, start_manifest
from .mdp import (
    AbstractStageMdp,
    Segment,
    TabularMdp,
    Trajectory,
    build_abstract_mdp,
    greedy_policy,
    make_rng,
    make_segment,
    normalize_rewards,
    rollout,
    value_iteration,
)
from .rewards import (
    LabeledPair,
    NetworkRewardModel,
    PreferenceLog,
    PreferenceRecord,
    RewardEnsemble,
    TabularRewardModel,
    Teacher,
    label_pair,
    make_tabular_ensemble,
    preference_probability,
    reward_loss_and_grad,
)
from .selection import (
    SELECTION_MODES,
    AlignmentReport,
    CandidateBatch,
    SelectionConfig,
    StageQuasimetric,
    alignment_case_check,
    build_stage_quasimetric,
    case_bounds,
    interval_span_ratio,
    interval_stage_difference,
    normalize_batch,
    quadrilateral_distance,
    select_queries,
    selection_score,
)
from .service import (
    LabelingService,
    QueryStore,
    ServiceMailbox,
    aligned_ratio_report,
    export_query_file,
    load_query_file,
)
from .stages import (
    BoundReport,
    StageAssignment,
    StageMap,
    TimestepClassifier,
    aggregate_stage_map,
    assign_stages,
    classifier_accuracy,
    fit_timestep_classifier,
    multistage_measure,
    segment_trajectory,
    stage_bound_report,
)

__version__ = "0.1.0"

__all__ = [
    "AbstractStageMdp", "AlignmentReport", "BoundReport", "CandidateBatch",
    "DegenerateScaleError", "GridWorld", "LabelMailbox", "LabeledPair",
    "LabelingService", "LoopConfig", "LoopResult", "NetworkEnergyModel",
    "NetworkRewardModel", "NumericalError", "OccupancyMatrix", "PreferenceLog",
    "PreferenceRecord", "QUERY_MODES", "QueryStore", "RewardEnsemble",
    "RunManifest", "SELECTION_MODES", "Segment", "SelectionConfig",
    "SelectionError", "ServiceMailbox", "SortCountReport", "StageAssignment",
    "StageMap", "StageQuasimetric", "StageprefError", "SuccessorDistance",
    "SweepResult", "TabularEnergyModel", "TabularExperimentConfig",
    "TabularMdp", "TabularRewardModel", "Teacher", "TimestepClassifier",
    "Trajectory", "aggregate_stage_map", "alignment_case_check",
    "assign_stages", "binary_insertion_sort", "build_abstract_mdp",
    "build_stage_quasimetric", "case_bounds", "classifier_accuracy",
    "config_hash", "count_sort_comparisons", "exact_occupancy",
    "export_query_file", "finish_manifest", "fit_successor_distance",
    "fit_timestep_classifier", "greedy_policy", "infonce_objective",
    "infonce_step", "interval_span_ratio", "interval_stage_difference",
    "label_pair", "learned_distance", "load_checkpoint", "load_query_file",
    "make_default_world", "make_rng", "make_segment", "make_tabular_ensemble",
    "multistage_measure", "normalize_batch", "normalize_rewards",
    "preference_probability", "quadrilateral_distance", "reward_loss_and_grad",
    "rollout", "run_experiment_sweep", "run_loop", "run_tabular_pbrl",
    "sample_positive_batch", "sample_positive_pair", "save_checkpoint",
    "segment_trajectory", "select_queries", "selection_score",
    "stage_bound_report", "start_manifest", "successor_distance_from_occupancy",
    "value_iteration", "aligned_ratio_report",
]
