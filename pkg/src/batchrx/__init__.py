"""batchrx: batch-constrained offline RL for continuous-dose treatment
policies, with a ground-truth synthetic cohort simulator and an evaluation
suite."""

from .autodiff import Adam, NonFiniteError, ShapeError, Tape, Tensor, grad_check
from .agent import Agent, AgentPolicy, Hyperparameters, TrainingLog, soft_update, train
from .cohort import (
    ACTION_NAMES,
    CSV_COLUMNS,
    FEATURE_NAMES,
    Cohort,
    CohortValidationError,
    Episode,
    Normalizer,
    TransitionBuffer,
    TransitionSample,
    compute_reward,
    load_cohort,
    split_cohort,
    terminal_reward,
    write_cohort_csv,
)
from .config import ConfigError, EvalSettings, RunConfig, load_config
from .evaluate import (
    CalibrationBin,
    DoseDiffBin,
    SafeRateReport,
    calibration_envelope,
    dose_difference_mortality,
    dose_distribution,
    q_survival_calibration,
    recommend_on_cohort,
    safe_rate,
    spearman,
)
from .simulator import (
    BehaviorPolicyAdapter,
    LatentState,
    PrefixState,
    SimParams,
    behavior_policy,
    extrapolation_error,
    generate_cohort,
    monte_carlo_q,
    sample_prefix_states,
    simulate_cohort,
)

__version__ = "0.1.0"
