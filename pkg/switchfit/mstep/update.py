from __future__ import annotations

import logging
from dataclasses import replace
from typing import Optional, Tuple

import numpy as np

from switchfit.data import Trajectory
from switchfit.likelihood import ModelParams, Regularizer, model_regressors
from switchfit.mstep.emission import emission_objective, solve_emission_step
from switchfit.mstep.newton import SolverOptions
from switchfit.mstep.switching import solve_switch_step
from switchfit.mstep.weights import SurrogateWeights


logger = logging.getLogger(__name__)


def m_step(
    model: ModelParams,
    weights: SurrogateWeights,
    traj: Trajectory,
    reg: Regularizer,
    opts: Optional[SolverOptions] = None,
    fixed_covariance: bool = False,
    Z: Optional[np.ndarray] = None,
) -> Tuple[ModelParams, bool]:
    """Solve the switching block and the ``d`` emission blocks of the surrogate.

    Every block keeps its incoming value when the solve would not improve it.
    """
    opts = opts or SolverOptions()
    if Z is None:
        Z = model_regressors(model, traj)
    Y = traj.y[1:]
    theta, exact = solve_switch_step(model.structure, weights, Z, reg.gamma1, opts, model.theta)

    betas = []
    for j, beta0 in enumerate(model.betas):
        beta, ok = solve_emission_step(model.family, weights, Y, Z, reg, j, opts, beta0, fixed_covariance)
        before = emission_objective(model.family, beta0, weights, Y, Z, reg, j)
        after = emission_objective(model.family, beta, weights, Y, Z, reg, j)
        if not after <= before:
            logger.debug("emission block %d kept its incoming value (%.17g > %.17g)", j, after, before)
            beta = beta0
        betas.append(beta)
        exact = exact and ok
    return replace(model, theta=theta, betas=tuple(betas)), exact
