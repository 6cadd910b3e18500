"""Online distributed primal-dual control with learned user costs.

The package couples a measurement-based primal-dual tracker for a
time-varying resource-coordination problem with shape-constrained
Gaussian-process surrogates of the (unknown) user cost functions.
"""

__version__ = "0.1.0"

from .gp import (
    DegenerateTruncation,
    FeedbackSet,
    GpModel,
    KernelParams,
    ShapeBounds,
    SingularKernel,
    constrained_posterior_mean,
    deriv_cov_02,
    deriv_cov_22,
    estimate_gradient,
    fit_surrogate,
    gp_posterior,
    se_kernel,
    second_deriv_posterior,
    truncated_second_deriv_mean,
)
from .network import (
    EmptyTopology,
    HorizonExceeded,
    Plant,
    Topology,
    TrackingConstraint,
    build_incidence,
    constraint_gradient,
    constraint_value,
    load_trace_csv,
    measure_output,
    model_output,
    reference_csv,
    synthetic_load,
    zero_order_hold,
)
from .solver import (
    BadInterval,
    FrozenInstance,
    NoConvergence,
    ProjectionSets,
    SolverState,
    StepInputs,
    dual_lambda_step,
    dual_nu_step,
    model_based_step,
    pd_step,
    primal_device_step,
    primal_user_step,
    project_ball,
    project_interval,
    solve_instance_oracle,
)
from .scenario import (
    ConfigError,
    DeviceSpec,
    Scenario,
    ScenarioConfig,
    UserSpec,
    build_scenario,
    default_config,
    feedback_event,
    load_config,
    true_cost,
    true_gradient,
)
from .metrics import (
    BoundConstants,
    MissingOracle,
    StepRecord,
    acv_and_fit,
    bound_curves,
    compute_bound_constants,
    gradient_error_metrics,
    path_lengths,
    regret_global,
    regret_network,
    regret_user,
)
from .runner import RunResult, RunSpec, run
