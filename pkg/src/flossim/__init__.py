"""flossim: a deterministic federated-learning simulator that corrects
opt-out and straggler missingness by inverse-propensity client sampling,
with an m-DAG engine for reasoning about the missingness structure."""

__version__ = "0.1.0"

from flossim.mdag import (
    MDag,
    MissingnessClass,
    Path,
    VariableNode,
    Visibility,
    build_mdag,
    check_shadow_conditions,
    classify_missingness,
    d_separated,
    enumerate_paths,
    gradient_missingness_graph,
    shadow_variable_graph,
)
from flossim.model import DpConfig, ModelParams, TrainConfig
from flossim.orchestrator import Mode, RoundLog, empirical_risk_gap, run_round, run_training, weighted_sample
from flossim.propensity import (
    PropensityBasis,
    PropensityModel,
    WeightTable,
    compute_weights,
    default_basis,
    moment_residuals,
    oracle_weights,
    solve_shadow_equations,
)
from flossim.synth import (
    PopulationConfig,
    UserRecord,
    default_population_config,
    draw_latency,
    generate_population,
    refresh_round_state,
)

__all__ = [
    "MDag",
    "MissingnessClass",
    "Path",
    "VariableNode",
    "Visibility",
    "build_mdag",
    "check_shadow_conditions",
    "classify_missingness",
    "d_separated",
    "enumerate_paths",
    "gradient_missingness_graph",
    "shadow_variable_graph",
    "DpConfig",
    "ModelParams",
    "TrainConfig",
    "Mode",
    "RoundLog",
    "empirical_risk_gap",
    "run_round",
    "run_training",
    "weighted_sample",
    "PropensityBasis",
    "PropensityModel",
    "WeightTable",
    "compute_weights",
    "default_basis",
    "moment_residuals",
    "oracle_weights",
    "solve_shadow_equations",
    "PopulationConfig",
    "UserRecord",
    "default_population_config",
    "draw_latency",
    "generate_population",
    "refresh_round_state",
]
