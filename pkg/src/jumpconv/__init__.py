"""Stochastic integrals and convolutions driven by compensated Poisson noise.

The package builds marked Poisson paths (`prm`), finite-dimensional smooth
normed state spaces (`space`), contraction semigroups (`sgp`), pathwise
stochastic integrals (`sint`) and convolutions (`sconv`), and a seeded
Monte Carlo harness (`verify`) plus a batch CLI (`cli`) that checks the
maximal-inequality family those objects satisfy.
"""

from .prm import MarkSpace, PoissonPath, compensated, count, make_rng, sample_path, substream
from .space import SmoothSpace, norm, phi, phi_grad, phi_grad_vector, phi_hess
from .sgp import Generator, check_contraction, check_dissipativity_phi
from .sint import (
    CadlagPath,
    FunctionField,
    PolynomialField,
    QuadConfig,
    ScalarRule,
    constant_field,
    function_field,
    integral_path,
    integrate_field,
    integrate_step,
    linear_field,
    ls_integral_N,
    ls_integral_nu,
    norm_power_rule,
    polynomial_field,
    step_field,
)
from .sconv import (
    ConvolutionScenario,
    ItoTerms,
    convolution_path,
    convolve_at,
    ito_terms,
    strong_solution_residual,
    yosida_convolution,
)
from .verify import (
    MODES,
    Ensemble,
    ExperimentConfig,
    HypothesisError,
    InequalityReport,
    LayerCakeReport,
    PathStats,
    StepApproxReport,
    dyadic_step_approximant,
    field_integral_ensemble,
    higher_moment_report,
    inequality_report,
    ito_isometry_report,
    layer_cake_bounds,
    layer_cake_check,
    maximal_lhs,
    maximal_rhs_N,
    maximal_rhs_nu,
    path_statistics,
    step_approx_convergence,
    stopped_report,
)

__version__ = "0.1.0"

__all__ = [
    "MarkSpace", "PoissonPath", "compensated", "count", "make_rng", "sample_path", "substream",
    "SmoothSpace", "norm", "phi", "phi_grad", "phi_grad_vector", "phi_hess",
    "Generator", "check_contraction", "check_dissipativity_phi",
    "CadlagPath", "FunctionField", "PolynomialField", "QuadConfig", "ScalarRule",
    "constant_field", "function_field", "integral_path", "integrate_field", "integrate_step",
    "linear_field", "ls_integral_N", "ls_integral_nu", "norm_power_rule",
    "polynomial_field", "step_field",
    "ConvolutionScenario", "ItoTerms", "convolution_path", "convolve_at",
    "ito_terms", "strong_solution_residual", "yosida_convolution",
    "MODES", "Ensemble", "ExperimentConfig", "HypothesisError", "InequalityReport",
    "LayerCakeReport", "PathStats", "StepApproxReport", "dyadic_step_approximant",
    "field_integral_ensemble", "higher_moment_report", "inequality_report",
    "ito_isometry_report", "layer_cake_bounds", "layer_cake_check", "maximal_lhs",
    "maximal_rhs_N", "maximal_rhs_nu", "path_statistics", "step_approx_convergence",
    "stopped_report",
    "__version__",
]
