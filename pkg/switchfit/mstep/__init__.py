from switchfit.mstep.emission import (
    emission_objective,
    solve_emission_step,
    solve_gaussian_step,
    solve_generic_smooth_step,
    solve_laplace_step,
    solve_student_t_step,
)
from switchfit.mstep.newton import SolverOptions, damped_newton, positive_scale_l1, weighted_median_ridge
from switchfit.mstep.surrogate import eval_surrogate, gradient_mask, surrogate_gradient_at_base
from switchfit.mstep.switching import (
    softmax_objective,
    softmax_regression,
    solve_switch_step,
    switch_gradient,
    switch_objective,
)
from switchfit.mstep.update import m_step
from switchfit.mstep.weights import SurrogateWeights, build_weights

__all__ = [
    "SolverOptions",
    "SurrogateWeights",
    "build_weights",
    "damped_newton",
    "emission_objective",
    "eval_surrogate",
    "gradient_mask",
    "m_step",
    "positive_scale_l1",
    "softmax_objective",
    "softmax_regression",
    "solve_emission_step",
    "solve_gaussian_step",
    "solve_generic_smooth_step",
    "solve_laplace_step",
    "solve_student_t_step",
    "solve_switch_step",
    "surrogate_gradient_at_base",
    "switch_gradient",
    "switch_objective",
    "weighted_median_ridge",
]
