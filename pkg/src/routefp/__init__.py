"""Expert-level attribution for merged mixture-of-experts models.

The package builds desk-scale merged models from task-specific experts,
applies tampering operations an infringer might use to hide reuse, and
attributes suspect experts back to the victim via routing fingerprints,
with parameter- and activation-space baselines for comparison.
"""

from .baselines import (
    BaselineScore,
    expert_pair_score,
    expert_score_matrix,
    expert_scores_and_matrix,
    ics_expert,
    ics_model,
    pcs_expert,
    pcs_model,
    reef,
)
from .bundleio import (
    FORMAT_VERSION,
    checksum_u64,
    load_model,
    load_moe,
    save_model,
    save_moe,
)
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    InvalidRequestError,
    RoutefpError,
    TrainingDivergedError,
)
from .fingerprint import (
    AttributionReport,
    ExpertFingerprint,
    RoutingTensor,
    SimilarityMatrix,
    attribute,
    build_fingerprints,
    capture_routing,
    center_routing,
    fingerprint_moe,
    similarity_matrix,
)
from .harness import (
    METHODS,
    SUITE_IDS,
    TAMPER_OPS,
    ScenarioConfig,
    ScenarioReport,
    VictimArtifacts,
    apply_tamper,
    build_victim,
    load_config,
    run_scenario,
    run_suite,
)
from .merging import MergedMoE, MoEOutput, assemble_moe, moe_forward, train_routers
from .numerics import Rng
from .synthdata import DataConfig, Dataset, TaskSpec, make_task, probe_suite
from .tampering import (
    RouterTrainConfig,
    TamperRecord,
    add_experts,
    delete_experts,
    finetune_experts,
    permute_hidden,
    prune_magnitude,
    prune_wanda,
    replace_experts,
)
from .toymodel import (
    Arch,
    ExpertDelta,
    ModelParams,
    accuracy,
    apply_delta,
    finetune,
    forward,
    init_pretrained,
    task_vector,
)

__version__ = "0.1.0"

__all__ = [
    "Arch",
    "AttributionReport",
    "BaselineScore",
    "DataConfig",
    "Dataset",
    "ExpertDelta",
    "ExpertFingerprint",
    "FORMAT_VERSION",
    "InvalidConfigError",
    "InvalidInputError",
    "InvalidRequestError",
    "METHODS",
    "MergedMoE",
    "MoEOutput",
    "ModelParams",
    "Rng",
    "RoutefpError",
    "RouterTrainConfig",
    "RoutingTensor",
    "SUITE_IDS",
    "ScenarioConfig",
    "ScenarioReport",
    "SimilarityMatrix",
    "TAMPER_OPS",
    "TamperRecord",
    "TaskSpec",
    "TrainingDivergedError",
    "VictimArtifacts",
    "accuracy",
    "add_experts",
    "apply_delta",
    "apply_tamper",
    "assemble_moe",
    "attribute",
    "build_fingerprints",
    "build_victim",
    "capture_routing",
    "center_routing",
    "checksum_u64",
    "delete_experts",
    "expert_pair_score",
    "expert_score_matrix",
    "expert_scores_and_matrix",
    "fingerprint_moe",
    "finetune",
    "finetune_experts",
    "forward",
    "ics_expert",
    "ics_model",
    "init_pretrained",
    "load_config",
    "load_model",
    "load_moe",
    "make_task",
    "moe_forward",
    "pcs_expert",
    "pcs_model",
    "permute_hidden",
    "probe_suite",
    "prune_magnitude",
    "prune_wanda",
    "reef",
    "replace_experts",
    "run_scenario",
    "run_suite",
    "save_model",
    "save_moe",
    "similarity_matrix",
    "task_vector",
    "train_routers",
]
