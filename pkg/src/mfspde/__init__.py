"""Mean-field SPDE simulation and adjoint-based optimal control.

Forward interacting-particle solves, regression-based backward solves, the
Hamiltonian/adjoint gradient machinery, a linear-quadratic fixed-point
solver with its dual control formula, and the divergence-form parabolic
Cauchy discretization, all on a finite-dimensional realization of the
V ⊂ H ⊂ V* frame.
"""

__version__ = "0.1.0"

from .triple import (  # noqa: F401
    DiscreteTriple,
    OperatorProcess,
    TimeGrid,
    adjoint_in_H,
    check_boundedness,
    check_coercivity,
    h_inner,
    identity_triple,
    zero_operator,
)
from .coeffs import (  # noqa: F401
    BackwardDriver,
    ControlCoeffs,
    LQCoeffs,
    MeanFieldDiffusion,
    MeanFieldDrift,
    estimate_lipschitz,
    lq_to_control_coeffs,
    validate_lq,
)
from .forward import (  # noqa: F401
    ControlProcess,
    ForwardProblem,
    ParticleEnsemble,
    ensemble_mean,
    moment_oracle,
    simulate,
)
from .backward import (  # noqa: F401
    AdjointPair,
    BackwardProblem,
    RegressionBasis,
    bspde_apriori_check,
    solve_backward,
    solve_linear_adjoint,
)
from .control import (  # noqa: F401
    ControlProblem,
    OptimizationReport,
    check_sufficiency,
    cost,
    fd_directional_derivative,
    hamiltonian,
    hamiltonian_gradients,
    hamiltonian_system_residual,
    optimize,
    variational_gradient,
)
from .lq import LQProblem, LQSolution, dual_control, solve_fixed_point, verify_coercivity  # noqa: F401
from .cauchy import (  # noqa: F401
    CauchySpec,
    analytic_adjoint_check,
    check_superparabolic,
    discretize,
    solve_cauchy,
)
from .estimates import (  # noqa: F401
    ScalingStudy,
    backward_dependence_study,
    forward_apriori_study,
    forward_dependence_study,
)
from .errors import (  # noqa: F401
    BlowUpError,
    MfspdeError,
    NonConvergenceError,
    SolverError,
    ValidationError,
)
