"""Many-server queues in a Markov-modulated environment: exact simulation,
limiting diffusions, HJB control and stability diagnostics."""
from .env_chain import EnvAnalytics, EnvGenerator, deviation_matrix, stationary_distribution, theta_matrix
from .errors import MMQError, NumericalError, PolicyError, ReducibleGeneratorError, ValidationError
from .hjb_solver import (
    CostSpec,
    Grid,
    GridValueFunction,
    epsilon_truncation,
    hamiltonian_minimizer,
    running_cost,
    solve_discounted,
    solve_ergodic,
)
from .limit_diffusion import (
    ClosureControl,
    ConstantControl,
    DiffusionSpec,
    GridControl,
    TruncatedControl,
    drift,
    generator_apply,
    simulate_sde,
)
from .model_params import ModelParams, covariance, derive, scaling_exponent, validate
from .prelimit_sim import (
    CustomPolicy,
    OmegaControl,
    StaticPriority,
    diffusion_scale,
    initial_state,
    omega_control_assign,
    omega_round,
    simulate,
    simulate_ensemble,
    static_priority_assign,
)

__version__ = "0.1.0"
