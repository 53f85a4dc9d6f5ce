"""Trajectories, the regressor map, benchmark generators and CSV I/O.

Time indexing: a trajectory holds ``y_0 .. y_T``. The regressor ``z_t`` is
built from ``y_t, y_{t-1}, ...`` and ``u_t, u_{t-1}, ...`` and explains
``y_{t+1}``. When a lag reaches before ``t = 0`` the value is taken from
``z0``, whose y-block entry ``m`` holds ``y_{-m}`` (and likewise for the
u-block); without ``z0`` the pre-history is zero.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from switchfit.errors import ConfigError, DataError, data_source_context


@dataclass(frozen=True)
class RegressorConfig:
    t_y: int = 1
    t_u: int = 0
    include_bias: bool = True

    def __post_init__(self):
        for name in ("t_y", "t_u"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError("must be a non-negative integer.", field=name)
        if self.t_y + self.t_u < 1 and not self.include_bias:
            raise ConfigError("a regressor needs at least one lag or the bias term.", field="include_bias")

    def n_z(self, n_y: int, n_u: int = 0) -> int:
        if self.t_u > 0 and n_u == 0:
            raise DataError(f"Regressor uses t_u={self.t_u} input lags but the trajectory has no inputs.")
        return self.t_y * n_y + self.t_u * n_u + (1 if self.include_bias else 0)

    def n_lags(self) -> int:
        return max(self.t_y, self.t_u)


@dataclass(frozen=True, eq=False)
class Trajectory:
    y: np.ndarray
    u: Optional[np.ndarray] = None
    z0: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or y.shape[0] < 2:
            raise DataError(f"Trajectory needs at least two observations (T >= 1), got shape {y.shape}.")
        if not np.all(np.isfinite(y)):
            row = int(np.argwhere(~np.isfinite(y))[0, 0])
            raise DataError(f"Non-finite observation at time index {row}.")
        object.__setattr__(self, "y", y)

        if self.u is not None:
            u = np.asarray(self.u, dtype=float)
            if u.ndim == 1:
                u = u[:, None]
            if u.shape[0] != y.shape[0]:
                raise DataError(
                    f"Inputs have {u.shape[0]} rows but observations have {y.shape[0]}."
                )
            if not np.all(np.isfinite(u)):
                row = int(np.argwhere(~np.isfinite(u))[0, 0])
                raise DataError(f"Non-finite input at time index {row}.")
            object.__setattr__(self, "u", u)

        if self.z0 is not None:
            z0 = np.asarray(self.z0, dtype=float).ravel()
            if not np.all(np.isfinite(z0)):
                raise DataError("Non-finite entry in z0.")
            object.__setattr__(self, "z0", z0)

    @property
    def T(self) -> int:
        return self.y.shape[0] - 1

    @property
    def n_y(self) -> int:
        return self.y.shape[1]

    @property
    def n_u(self) -> int:
        return 0 if self.u is None else self.u.shape[1]

    def segment(self, start: int, stop: int, cfg: RegressorConfig) -> "Trajectory":
        """Sub-trajectory ``y_start .. y_stop`` whose regressors equal the parent's."""
        if not 0 <= start < stop <= self.T:
            raise DataError(f"Segment ({start}, {stop}) is outside [0, {self.T}].")
        return Trajectory(
            y=self.y[start : stop + 1].copy(),
            u=None if self.u is None else self.u[start : stop + 1].copy(),
            z0=build_regressor(self, cfg, start),
        )


@dataclass(frozen=True)
class DatasetSplit:
    """Contiguous transition ranges ``(start, stop)``: range ``(a, b)`` explains ``y_{a+1} .. y_b``."""

    train: Tuple[int, int]
    validation: Optional[Tuple[int, int]] = None
    test: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        previous_stop = 0
        for name in ("train", "validation", "test"):
            rng = getattr(self, name)
            if rng is None:
                continue
            start, stop = int(rng[0]), int(rng[1])
            if start < 0 or stop <= start:
                raise ConfigError(f"range ({start}, {stop}) is empty or negative.", field=f"split.{name}")
            if start < previous_stop:
                raise ConfigError("ranges must be ordered train < validation < test and disjoint.", field=f"split.{name}")
            previous_stop = stop
            object.__setattr__(self, name, (start, stop))

    @classmethod
    def from_sizes(cls, n_train: int, n_validation: int = 0, n_test: int = 0) -> "DatasetSplit":
        a = n_train
        b = a + n_validation
        return cls(
            train=(0, a),
            validation=(a, b) if n_validation else None,
            test=(b, b + n_test) if n_test else None,
        )

    def check_within(self, traj: Trajectory) -> None:
        for name in ("train", "validation", "test"):
            rng = getattr(self, name)
            if rng is not None and rng[1] > traj.T:
                raise DataError(f"Split range '{name}' {rng} exceeds the trajectory length T={traj.T}.")


# Regressor map


def _padded(values: np.ndarray, z0_block: Optional[np.ndarray], lags: int) -> np.ndarray:
    """Stack ``lags - 1`` pre-history rows (oldest first) on top of ``values``."""
    n = values.shape[1]
    pre = np.zeros((max(lags - 1, 0), n))
    if z0_block is not None and lags > 1:
        blocks = z0_block.reshape(lags, n)
        # block m holds the value at time -m
        pre = blocks[1:][::-1].copy()
    return np.vstack([pre, values])


def _z0_blocks(traj: Trajectory, cfg: RegressorConfig):
    n_z = cfg.n_z(traj.n_y, traj.n_u)
    if traj.z0 is None:
        return None, None
    if traj.z0.shape[0] != n_z:
        raise DataError(f"z0 has {traj.z0.shape[0]} entries but the regressor needs n_z={n_z}.")
    k = cfg.t_y * traj.n_y
    y_block = traj.z0[:k]
    u_block = traj.z0[k : k + cfg.t_u * traj.n_u]
    return y_block, u_block


def regressor_matrix(traj: Trajectory, cfg: RegressorConfig, stop: Optional[int] = None) -> np.ndarray:
    """Rows ``z_0 .. z_{stop-1}`` (``stop`` defaults to T)."""
    stop = traj.T if stop is None else stop
    if not 0 <= stop <= traj.T + 1:
        raise DataError(f"Regressor range stop={stop} is outside [0, {traj.T + 1}].")
    y_block, u_block = _z0_blocks(traj, cfg)
    columns = []
    if cfg.t_y > 0:
        ypad = _padded(traj.y, y_block, cfg.t_y)
        offset = cfg.t_y - 1
        for k in range(cfg.t_y):
            columns.append(ypad[offset - k : offset - k + stop])
    if cfg.t_u > 0:
        upad = _padded(traj.u, u_block, cfg.t_u)
        offset = cfg.t_u - 1
        for k in range(cfg.t_u):
            columns.append(upad[offset - k : offset - k + stop])
    if cfg.include_bias:
        columns.append(np.ones((stop, 1)))
    return np.hstack(columns)


def build_regressor(traj: Trajectory, cfg: RegressorConfig, t: int) -> np.ndarray:
    if not 0 <= t <= traj.T:
        raise DataError(f"Time index t={t} is outside [0, {traj.T}].")
    return regressor_matrix(traj, cfg, stop=t + 1)[t].copy()


# Outliers


def inject_outliers(
    traj: Trajectory,
    p: float,
    seed: int,
    span: Optional[Tuple[int, int]] = None,
) -> Tuple[Trajectory, int]:
    """Perturb each observation of ``span`` with probability ``p``.

    The noise is uniform on ``[-max|y|, max|y|]`` per component, the maximum
    taken over the whole trajectory. Returns the new trajectory and the number
    of perturbed observations.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError("must lie in [0, 1].", field="p")
    start, stop = (0, traj.T) if span is None else span
    if not 0 <= start < stop <= traj.T:
        raise DataError(f"Outlier span ({start}, {stop}) is outside [0, {traj.T}].")
    rng = np.random.default_rng(seed)
    rows = np.arange(start + 1, stop + 1)
    hit = rows[rng.uniform(size=rows.shape[0]) < p]
    amplitude = np.abs(traj.y).max(axis=0)
    y = traj.y.copy()
    y[hit] += rng.uniform(-1.0, 1.0, size=(hit.shape[0], traj.n_y)) * amplitude
    u = None if traj.u is None else traj.u.copy()
    return Trajectory(y=y, u=u, z0=traj.z0), int(hit.shape[0])


# Benchmark systems

SYNTHETIC_A = (
    np.array([[0.9912, 0.1307, 0.2], [-0.1305, 0.9914, 0.06]]),
    np.array([[0.94, 0.15, -0.01], [-0.15, 0.94, -0.13]]),
    np.array([[0.97, 0.4, 0.1], [-0.4, 0.97, 0.1]]),
)
SYNTHETIC_THETA = (
    np.array([[30.0, 10.0], [1.0, -16.07], [-10.0, 10.0]]),
    np.array([[30.0, 30.0], [20.0, -10.0], [0.0, 0.0]]),
    np.array([[24.8, 0.0], [11.38, -28.62], [-57.73, 7.07]]),
)
SYNTHETIC_NOISE_VAR = 1e-3

ARX_BETAS = (
    np.array([1.143, -0.4346, 0.0572, 0.2415]),
    np.array([0.9534, -0.0475, 0.0618, 0.0336]),
    np.array([1.178, -0.09, 0.089, 0.15]),
)
ARX_TRANSITIONS = np.array(
    [
        [0.25, 0.10, 0.65],
        [0.55, 0.35, 0.10],
        [0.15, 0.15, 0.70],
    ]
)
ARX_NOISE_VAR = 0.025

PWA_GUARD = np.array([0.5, 1.0, 2.0, -0.3, 0.2])
PWA_BETAS = (
    np.array([0.1, 0.5, -0.4, 0.3, 0.0]),
    np.array([0.2, 0.4, 0.1, 0.4, 0.0]),
)
PWA_NOISE_VAR = 1e-4
PWA_INPUT_STD = 0.5
PWA_GUARD_SHARPNESS = 1e3

ARX_CONFIG = RegressorConfig(t_y=2, t_u=2, include_bias=False)
PWA_CONFIG = RegressorConfig(t_y=2, t_u=2, include_bias=True)
SYNTHETIC_CONFIG = RegressorConfig(t_y=1, t_u=0, include_bias=True)


def _gaussian_modes(locations, noise_var: float):
    from switchfit.families import PrecisionParams

    params = []
    for L in locations:
        L = np.atleast_2d(L)
        Lam = np.eye(L.shape[0]) / noise_var
        params.append(PrecisionParams(B=Lam @ L, Lam=Lam))
    return tuple(params)


def gen_synthetic_3mode(T: int, seed: int):
    """Two-dimensional three-mode system with state-and-mode dependent switching."""
    from switchfit.families import FamilyKind
    from switchfit.likelihood import ModelParams, SwitchStructure, simulate

    model = ModelParams(
        structure=SwitchStructure.FULL,
        family=FamilyKind.gaussian(),
        betas=_gaussian_modes(SYNTHETIC_A, SYNTHETIC_NOISE_VAR),
        theta=np.stack(SYNTHETIC_THETA),
        cfg=SYNTHETIC_CONFIG,
    )
    rng = np.random.default_rng(seed)
    z0 = np.concatenate([rng.uniform(-1.0, 1.0, size=2), [1.0]])
    traj, _ = simulate(model, T, z0=z0, seed=int(rng.integers(2**63)))
    return traj, model


def gen_markov_arx(T: int, seed: int):
    """Three-mode ARX system with a Markov transition matrix."""
    from switchfit.families import FamilyKind
    from switchfit.likelihood import ModelParams, SwitchStructure, simulate

    logits = np.log(ARX_TRANSITIONS[:, :-1] / ARX_TRANSITIONS[:, -1:])
    model = ModelParams(
        structure=SwitchStructure.MODE_DEPENDENT,
        family=FamilyKind.gaussian(),
        betas=_gaussian_modes(ARX_BETAS, ARX_NOISE_VAR),
        theta=logits[:, None, :],
        cfg=ARX_CONFIG,
    )
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=(T + 1, 1))
    traj, _ = simulate(
        model,
        T,
        z0=np.zeros(ARX_CONFIG.n_z(1, 1)),
        seed=int(rng.integers(2**63)),
        inputs=u,
    )
    return traj, model


def gen_pwa(T: int, seed: int):
    """Piecewise affine system switching on the sign of a linear guard.

    The returned model is the state-dependent softmax approximation of the
    guard (sharpness ``PWA_GUARD_SHARPNESS``); the trajectory itself switches
    deterministically.
    """
    from switchfit.families import FamilyKind
    from switchfit.likelihood import ModelParams, SwitchStructure

    rng = np.random.default_rng(seed)
    u = rng.normal(0.0, PWA_INPUT_STD, size=(T + 1, 1))
    y = np.zeros((T + 1, 1))
    noise = rng.normal(0.0, np.sqrt(PWA_NOISE_VAR), size=T)
    for t in range(T):
        z = np.array(
            [
                y[t, 0],
                y[t - 1, 0] if t >= 1 else 0.0,
                u[t, 0],
                u[t - 1, 0] if t >= 1 else 0.0,
                1.0,
            ]
        )
        beta = PWA_BETAS[0] if PWA_GUARD @ z >= 0.0 else PWA_BETAS[1]
        y[t + 1, 0] = beta @ z + noise[t]

    model = ModelParams(
        structure=SwitchStructure.STATE_DEPENDENT,
        family=FamilyKind.gaussian(),
        betas=_gaussian_modes(PWA_BETAS, PWA_NOISE_VAR),
        theta=(PWA_GUARD_SHARPNESS * PWA_GUARD)[None, :, None],
        cfg=PWA_CONFIG,
    )
    return Trajectory(y=y, u=u, z0=np.zeros(PWA_CONFIG.n_z(1, 1))), model


# CSV I/O

_COLUMN_RE = re.compile(r"^(y|u)([1-9][0-9]*)$")
_PARSER_LINE_RE = re.compile(r"line (\d+)")


def _column_order(columns) -> Tuple[list, list]:
    y_cols, u_cols = {}, {}
    for col in columns:
        match = _COLUMN_RE.match(str(col).strip())
        if match is None:
            raise DataError(f"Unexpected column '{col}'; expected y1..yN and u1..uM.", line=1)
        target = y_cols if match.group(1) == "y" else u_cols
        target[int(match.group(2))] = col
    for name, cols in (("y", y_cols), ("u", u_cols)):
        if cols and sorted(cols) != list(range(1, len(cols) + 1)):
            raise DataError(f"Columns {name}1..{name}{len(cols)} must be numbered consecutively.", line=1)
    if not y_cols:
        raise DataError("No observation columns (y1, y2, ...).", line=1)
    return [y_cols[k] for k in sorted(y_cols)], [u_cols[k] for k in sorted(u_cols)]


def load_csv(path) -> Trajectory:
    path = Path(path)
    with data_source_context(str(path)):
        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=True, encoding="utf-8")
        except pd.errors.ParserError as exc:
            match = _PARSER_LINE_RE.search(str(exc))
            line = int(match.group(1)) if match else None
            raise DataError(f"Malformed row: {exc}", line=line) from exc
        except (pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
            raise DataError(f"Unreadable trajectory file: {exc}") from exc

        y_cols, u_cols = _column_order(frame.columns)
        values = np.empty(frame.shape, dtype=float)
        for j, col in enumerate(frame.columns):
            cells = frame[col].str.strip()
            numeric = pd.to_numeric(cells, errors="coerce")
            bad = numeric.isna().to_numpy()
            if bad.any():
                row = int(np.argmax(bad))
                cell = cells.iloc[row]
                reason = "missing value (ragged row)" if pd.isna(cell) or cell == "" else f"non-numeric value '{cell}'"
                raise DataError(f"Column '{col}': {reason}.", line=row + 2)
            values[:, j] = numeric.to_numpy(dtype=float)

        data = pd.DataFrame(values, columns=frame.columns)
        y = data[y_cols].to_numpy()
        u = data[u_cols].to_numpy() if u_cols else None
        return Trajectory(y=y, u=u)


def save_csv(traj: Trajectory, path) -> None:
    columns = {f"y{k + 1}": traj.y[:, k] for k in range(traj.n_y)}
    for k in range(traj.n_u):
        columns[f"u{k + 1}"] = traj.u[:, k]
    pd.DataFrame(columns).to_csv(Path(path), index=False, float_format="%.17g", encoding="utf-8")
