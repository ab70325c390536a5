"""First-order battery model, EMF curve and parameter conversions.

The model is the discrete 1-RC cell used throughout the package::

    s[k+1] = s[k] + tau / C0 * u[k]
    o[k+1] = theta1 * o[k] + theta2 * u[k]
    y[k]   = g(s[k]) + o[k] + theta3 * u[k]

with positive current charging the cell. Only constant scheduling
functions are shipped; the hooks on :class:`ThetaParams` default to 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels as K

log = logging.getLogger(__name__)

EXTRAPOLATION_LOG_MARGIN = 0.05


class DegenerateParametersError(ValueError):
    """Raised when a parameter set has no equivalent-circuit counterpart."""


class EmfCurveError(ValueError):
    """Raised for malformed EMF tables."""


@dataclass(frozen=True, slots=True)
class Sample:
    t: float  # s
    u: float  # A, positive = charging
    y: float  # V
    temp: Optional[float] = None  # degC, carried but unused


@dataclass(frozen=True)
class EmfCurve:
    """Monotonic SoC -> EMF table with piecewise-linear interpolation."""

    soc: np.ndarray
    voltage: np.ndarray
    slopes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        soc = np.ascontiguousarray(self.soc, dtype=float)
        volt = np.ascontiguousarray(self.voltage, dtype=float)
        if soc.ndim != 1 or soc.shape != volt.shape:
            raise EmfCurveError("soc and voltage must be 1-D arrays of equal length")
        if soc.size < 3:
            raise EmfCurveError(f"EMF curve needs at least 3 points, got {soc.size}")
        if not (np.all(np.isfinite(soc)) and np.all(np.isfinite(volt))):
            raise EmfCurveError("EMF curve contains non-finite values")
        if np.any(np.diff(soc) <= 0):
            raise EmfCurveError("EMF soc values must be strictly increasing")
        if np.any(np.diff(volt) <= 0):
            raise EmfCurveError("EMF voltage values must be strictly increasing")
        if soc[0] != 0.0 or soc[-1] != 1.0:
            raise EmfCurveError("EMF curve must cover soc = 0 and soc = 1")
        soc.setflags(write=False)
        volt.setflags(write=False)
        slopes = np.diff(volt) / np.diff(soc)
        slopes.setflags(write=False)
        object.__setattr__(self, "soc", soc)
        object.__setattr__(self, "voltage", volt)
        object.__setattr__(self, "slopes", slopes)

    @classmethod
    def from_points(cls, points: Sequence[tuple[float, float]]) -> "EmfCurve":
        arr = np.asarray(points, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise EmfCurveError("points must be (soc, voltage) pairs")
        return cls(arr[:, 0], arr[:, 1])

    @property
    def points(self) -> list[tuple[float, float]]:
        return [(float(s), float(v)) for s, v in zip(self.soc, self.voltage)]

    @property
    def v_min(self) -> float:
        return float(self.voltage[0])

    @property
    def v_max(self) -> float:
        return float(self.voltage[-1])

    def __eq__(self, other):
        if not isinstance(other, EmfCurve):
            return NotImplemented
        return np.array_equal(self.soc, other.soc) and np.array_equal(self.voltage, other.voltage)

    def __hash__(self):
        return hash((self.soc.tobytes(), self.voltage.tobytes()))


def emf_eval(curve: EmfCurve, s: float) -> float:
    """EMF at SoC ``s``; linear extrapolation from the end segments outside [0, 1]."""
    if abs(s - min(max(s, 0.0), 1.0)) > EXTRAPOLATION_LOG_MARGIN:
        log.debug("EMF extrapolated at soc=%.4f", s)
    return float(K.emf_value(curve.soc, curve.voltage, curve.slopes, float(s)))


def emf_derivative(curve: EmfCurve, s: float) -> float:
    """dg/ds of the segment containing ``s`` (right segment at knots, left at s=1)."""
    return float(K.emf_slope(curve.soc, curve.slopes, float(s)))


def emf_invert(curve: EmfCurve, v: float) -> float:
    """SoC whose EMF equals ``v``, clamped to [0, 1] outside the voltage span."""
    return float(K.emf_inverse(curve.soc, curve.voltage, curve.slopes, float(v)))


def _one(_p=None) -> float:
    return 1.0


@dataclass(frozen=True)
class ThetaParams:
    theta1: float
    theta2: float  # ohm
    theta3: float  # ohm
    tau: float  # s
    capacity: float  # As
    # scheduling hooks f1..f3; only the constant 1 ships
    f1: Callable = field(default=_one, repr=False, compare=False)
    f2: Callable = field(default=_one, repr=False, compare=False)
    f3: Callable = field(default=_one, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 < self.theta1 < 1.0:
            raise DegenerateParametersError(f"theta1 must lie in (0, 1), got {self.theta1}")
        if not self.capacity > 0:
            raise ValueError(f"capacity must be positive, got {self.capacity}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class EcmParams:
    r0: float  # ohm
    r1: float  # ohm
    c1: float  # F
    capacity: float  # As

    def __post_init__(self):
        if not (self.r0 >= 0 and self.r1 > 0 and self.c1 > 0 and self.capacity > 0):
            raise ValueError(f"invalid ECM parameters: {self}")

    @property
    def capacity_ah(self) -> float:
        return self.capacity / 3600.0


@dataclass(frozen=True)
class ModelState:
    s: float  # SoC, left unclamped
    o: float  # V


def model_step(state: ModelState, params: ThetaParams, u: float, p=None) -> ModelState:
    s = state.s + params.tau / params.capacity * u
    o = params.theta1 * params.f1(p) * state.o + params.theta2 * params.f2(p) * u
    return ModelState(s, o)


def model_output(state: ModelState, params: ThetaParams, curve: EmfCurve, u: float, p=None) -> float:
    return emf_eval(curve, state.s) + state.o + params.theta3 * params.f3(p) * u


def theta_to_ecm(params: ThetaParams) -> EcmParams:
    """Exact 1-RC equivalent of the theta parametrization.

    The exponential factor uses the sample period as its time argument.
    """
    t1, t2 = params.theta1, params.theta2
    if t1 <= 0.0 or t1 >= 1.0 or t2 == 0.0:
        raise DegenerateParametersError(f"no ECM equivalent for theta1={t1}, theta2={t2}")
    r1 = -t2 / (t1 - 1.0)
    c1 = -(math.exp(-params.tau) * (t1 - 1.0)) / (t1 * t2)
    return EcmParams(r0=params.theta3, r1=r1, c1=c1, capacity=params.capacity)


def ecm_to_theta(ecm: EcmParams, tau: float) -> ThetaParams:
    """Inverse of :func:`theta_to_ecm` for sample period ``tau``."""
    theta1 = math.exp(-tau) / (ecm.r1 * ecm.c1)
    if not 0.0 < theta1 < 1.0:
        raise DegenerateParametersError(
            f"r1*c1={ecm.r1 * ecm.c1:.6g} gives theta1={theta1:.6g} outside (0, 1)")
    theta2 = ecm.r1 * (1.0 - theta1)
    return ThetaParams(theta1=theta1, theta2=theta2, theta3=ecm.r0, tau=tau, capacity=ecm.capacity)


def ecm_for_theta1(r0: float, r1: float, capacity: float, theta1: float = 0.99, tau: float = 1.0) -> EcmParams:
    """ECM whose capacitance puts the discrete relaxation rate at ``theta1``."""
    c1 = math.exp(-tau) / (theta1 * r1)
    return EcmParams(r0=r0, r1=r1, c1=c1, capacity=capacity)


def with_capacity(params: ThetaParams, capacity: float) -> ThetaParams:
    return replace(params, capacity=capacity)
