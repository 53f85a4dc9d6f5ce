from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from switchfit import families as fam
from switchfit.data import Trajectory
from switchfit.errors import DomainError
from switchfit.likelihood import ModelParams, model_regressors
from switchfit.posterior import Posteriors


@dataclass(frozen=True, eq=False)
class SurrogateWeights:
    """Posterior weights and frozen linearization slopes defining one M-step.

    ``lin_coeffs[t, i]`` is ``f'(l_t(beta_i))`` at the base point and
    ``const_offset`` collects ``sum pi (f(l) - f'(l) l)`` there.
    """

    xi_weights: np.ndarray
    mode_weights: np.ndarray
    initial_weights: np.ndarray
    lin_coeffs: np.ndarray
    base_ell: np.ndarray
    const_offset: float
    base_model: ModelParams

    @property
    def T(self) -> int:
        return self.mode_weights.shape[0]

    @property
    def d(self) -> int:
        return self.mode_weights.shape[1]


def build_weights(model: ModelParams, post: Posteriors, traj: Trajectory, Z: Optional[np.ndarray] = None) -> SurrogateWeights:
    if post.T != traj.T or post.d != model.d:
        raise DomainError(
            f"Posteriors cover T={post.T}, d={post.d} but the model/trajectory have T={traj.T}, d={model.d}."
        )
    if Z is None:
        Z = model_regressors(model, traj)
    Y = traj.y[1:]
    kind = model.family
    lower = fam.f_domain_lower(kind)
    base_ell = np.empty((traj.T, model.d))
    for i, beta in enumerate(model.betas):
        ell, _ = fam.ell_g_batch(kind, beta, Y, Z)
        if lower is not None and np.any(~(ell > lower)):
            t = int(np.flatnonzero(~(ell > lower))[0])
            raise DomainError(f"l = {ell[t]!r} leaves the f-domain at (t={t}, mode={i}).")
        base_ell[:, i] = ell
    f_val, lin_coeffs = fam.f_value_and_derivative(kind, fam.clamp_to_domain(kind, base_ell), n_y=model.n_y)
    mode_weights = post.gamma[1:]
    const_offset = float(np.sum(mode_weights * (f_val - lin_coeffs * base_ell)))
    return SurrogateWeights(
        xi_weights=post.xi,
        mode_weights=mode_weights,
        initial_weights=post.gamma[0],
        lin_coeffs=np.asarray(lin_coeffs, dtype=float),
        base_ell=base_ell,
        const_offset=const_offset,
        base_model=model,
    )
