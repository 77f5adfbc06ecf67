"""Variational inference with weighted products of multivariate t experts."""

from .errors import (
    ConstraintRepairError,
    DimensionError,
    EmptyModelError,
    NonConvergenceError,
    NonFiniteError,
    NormalizabilityError,
    PoEError,
    ProtocolError,
    SingularityError,
    TransportError,
)
from .expert_selection import SelectionConfig, build_pool, find_mode
from .metrics import evaluate, fisher_under_p, forward_kl, gaussian_baseline, neg_llh
from .poe_model import (
    Expert,
    ExpertPool,
    PoEDensity,
    load_pool,
    mixture_component,
    poe_score,
    poe_unnorm_log_density,
    save_pool,
    score_matrix,
)
from .qp_solver import FeasibleSet, QuadraticProgram, solve_constrained
from .score_match import FitConfig, fit
from .simplex_sampling import draw_weighted_batch, estimate_log_normalizer, sample_dirichlet
from .targets import (
    ReferenceSamples,
    TargetModel,
    external_target,
    funnel_target,
    gaussian_mixture_target,
    load_reference_samples,
    make_zoo_target,
    poe_target,
    rosenbrock_target,
    sinh_arcsinh_target,
)

__version__ = "0.1.0"
