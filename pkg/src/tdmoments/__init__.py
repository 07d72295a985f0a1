"""Learn moments of the return with TD and estimate functions of the return."""
from .mdp import (
    CliffWalkConfig,
    EpisodeTrace,
    MdpModel,
    PolicyTable,
    build_cliff_walk,
    discounted_return,
    risky_policy,
    run_episode,
    safe_policy,
    sample_action,
)
from .moments import (
    DivergenceError,
    FeatureMap,
    MomentEstimator,
    TransitionSample,
    binomial,
    central_from_raw,
    run_policy_evaluation,
    surrogate_reward,
)
from .oracle import OracleEstimate, OracleQualityError, mapve, oracle_moments, oracle_utility
from .taylor import (
    FunctionDescriptor,
    UtilityEstimate,
    register_builtin,
    taylor_about_mean,
    taylor_about_zero,
    truncation_report,
)

__version__ = "0.1.0"
