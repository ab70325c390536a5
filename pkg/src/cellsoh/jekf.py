"""Joint extended Kalman filter with a covariance forgetting factor.

State order is ``[s, o, theta2, theta3]``; when ``estimate_theta1`` is set
the relaxation rate is appended as a fifth entry. The forgetting factor
enters as covariance inflation ``P- = F P F' / gamma`` with no additive
process noise, so gamma is the only tuning knob.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .model import EmfCurve, emf_invert


class JekfConfigError(ValueError):
    pass


class CovarianceError(FloatingPointError):
    """Innovation variance became non-positive; the covariance is corrupted."""


DEFAULT_P0 = (1.0, 1.0, 1e-6, 4e-4)
DEFAULT_X0 = (0.0, 1e-4, 0.02)


@dataclass(frozen=True)
class JekfConfig:
    gamma: float = 0.999
    theta1_fixed: float = 0.99
    tau: float = 1.0
    meas_noise_var: float = 2.5e-5
    estimate_theta1: bool = False
    p0: Optional[Sequence[float]] = None
    x0_overrides: Sequence[float] = DEFAULT_X0
    theta1_p0: float = 1e-7
    # reject updates with |innovation| > gate * sqrt(S); 0 disables
    innovation_gate: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise JekfConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.theta1_fixed < 1.0:
            raise JekfConfigError(f"theta1_fixed must lie in (0, 1), got {self.theta1_fixed}")
        if not self.tau > 0:
            raise JekfConfigError(f"tau must be positive, got {self.tau}")
        if not self.meas_noise_var > 0:
            raise JekfConfigError(f"meas_noise_var must be positive, got {self.meas_noise_var}")
        if len(self.x0_overrides) != 3:
            raise JekfConfigError("x0_overrides must hold [o, theta2, theta3]")
        if self.innovation_gate < 0:
            raise JekfConfigError("innovation_gate must be >= 0")
        diag = self.p0_diagonal()
        if len(diag) != self.n_states:
            raise JekfConfigError(f"p0 needs {self.n_states} entries, got {len(diag)}")
        if any(not v > 0 for v in diag):
            raise JekfConfigError(f"p0 entries must be positive, got {diag}")

    @property
    def n_states(self) -> int:
        return 5 if self.estimate_theta1 else 4

    def p0_diagonal(self) -> tuple[float, ...]:
        if self.p0 is not None:
            diag = tuple(float(v) for v in self.p0)
            if self.estimate_theta1 and len(diag) == 4:
                diag = diag + (float(self.theta1_p0),)
            return diag
        if self.estimate_theta1:
            return DEFAULT_P0 + (float(self.theta1_p0),)
        return DEFAULT_P0


@dataclass
class JekfState:
    x: np.ndarray
    P: np.ndarray
    capacity: float  # As
    flagged_count: int = 0

    @property
    def s(self) -> float:
        return float(self.x[0])

    @property
    def o(self) -> float:
        return float(self.x[1])

    @property
    def theta2(self) -> float:
        return float(self.x[2])

    @property
    def theta3(self) -> float:
        return float(self.x[3])

    def theta1(self, cfg: JekfConfig) -> float:
        return float(self.x[4]) if self.x.shape[0] == 5 else cfg.theta1_fixed

    def copy(self) -> "JekfState":
        return JekfState(self.x.copy(), self.P.copy(), self.capacity, self.flagged_count)


def jekf_init(curve: EmfCurve, first_voltage: float, capacity0: float, cfg: JekfConfig) -> JekfState:
    """Filter state for a cell assumed to start at rest."""
    if not capacity0 > 0:
        raise JekfConfigError(f"capacity0 must be positive, got {capacity0}")
    s0 = emf_invert(curve, first_voltage)
    x = [s0, *map(float, cfg.x0_overrides)]
    if cfg.estimate_theta1:
        x.append(cfg.theta1_fixed)
    P = np.diag(np.asarray(cfg.p0_diagonal(), dtype=float))
    return JekfState(np.asarray(x, dtype=float), P, float(capacity0))


def predict_state(state: JekfState, u: float, cfg: JekfConfig) -> np.ndarray:
    out = np.empty_like(state.x)
    K.jekf_predict(state.x, float(u), state.capacity, cfg.tau, cfg.theta1_fixed, out)
    return out


def transition_jacobian(x: np.ndarray, u: float, cfg: JekfConfig) -> np.ndarray:
    F = np.empty((x.shape[0], x.shape[0]))
    K.jekf_transition_jacobian(np.asarray(x, dtype=float), float(u), cfg.theta1_fixed, F)
    return F


def predicted_output(x: np.ndarray, u: float, curve: EmfCurve) -> float:
    return float(K.jekf_output(np.asarray(x, dtype=float), float(u), curve.soc, curve.voltage, curve.slopes))


def output_jacobian(x: np.ndarray, u: float, curve: EmfCurve) -> np.ndarray:
    H = np.empty(x.shape[0])
    K.jekf_output_jacobian(np.asarray(x, dtype=float), float(u), curve.soc, curve.slopes, H)
    return H


def jekf_step(state: JekfState, u: float, y: float, curve: EmfCurve,
              cfg: JekfConfig) -> tuple[JekfState, float, float]:
    """Predict with current ``u``, correct with voltage ``y``.

    Returns the corrected state, the prediction made before the
    correction and the innovation ``y - y_hat``.
    """
    new = state.copy()
    y_hat, innov, s_var, status = K.jekf_step_inplace(
        new.x, new.P, new.capacity, float(u), float(y), curve.soc, curve.voltage,
        curve.slopes, cfg.tau, cfg.theta1_fixed, cfg.gamma, cfg.meas_noise_var,
        cfg.innovation_gate)
    if status == K.STEP_BAD_INNOVATION_VAR:
        raise CovarianceError(f"innovation variance {s_var!r} is not positive")
    return new, float(y_hat), float(innov)


def stability_guard(state: JekfState, cfg: JekfConfig) -> tuple[JekfState, bool]:
    """Clamp an estimated theta1 at or above 1 back inside the stable region."""
    if not cfg.estimate_theta1:
        return state, False
    new = state.copy()
    flagged = bool(K.stability_guard_inplace(new.x))
    if flagged:
        new.flagged_count += 1
    return new, flagged


def set_capacity(state: JekfState, c0: float) -> JekfState:
    if not c0 > 0:
        raise ValueError(f"capacity must be positive, got {c0}")
    return replace(state, x=state.x.copy(), P=state.P.copy(), capacity=float(c0))
