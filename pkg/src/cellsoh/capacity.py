"""Charge-segment detection and fading-memory least-squares capacity estimation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K


class DegenerateWindowError(ValueError):
    pass


class SegmentMode(str, enum.Enum):
    CHARGE_ONLY = "charge-only"
    ANY_WINDOW = "any-window"

    @property
    def code(self) -> int:
        return K.MODE_CHARGE_ONLY if self is SegmentMode.CHARGE_ONLY else K.MODE_ANY_WINDOW


class SegmentEvent(str, enum.Enum):
    OPENED = "opened"
    CLOSED_ACCEPTED = "closed_accepted"
    CLOSED_DISCARDED = "closed_discarded"


EVENT_FROM_CODE = {
    K.EVT_NONE: None,
    K.EVT_OPENED: SegmentEvent.OPENED,
    K.EVT_ACCEPTED: SegmentEvent.CLOSED_ACCEPTED,
    K.EVT_DISCARDED: SegmentEvent.CLOSED_DISCARDED,
}


@dataclass(frozen=True)
class SegmentPolicy:
    mode: SegmentMode = SegmentMode.CHARGE_ONLY
    min_delta_soc: float = 0.2
    # None -> C/20 of the nominal capacity, see resolved()
    charge_current_threshold: Optional[float] = None
    max_gap_samples: int = 5
    tau: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", SegmentMode(self.mode))
        if not 0.0 < self.min_delta_soc < 1.0:
            raise ValueError(f"min_delta_soc must lie in (0, 1), got {self.min_delta_soc}")
        if self.charge_current_threshold is not None and not self.charge_current_threshold > 0:
            raise ValueError("charge_current_threshold must be positive")
        if self.max_gap_samples < 0:
            raise ValueError("max_gap_samples must be >= 0")

    def resolved(self, nominal_capacity: float) -> "SegmentPolicy":
        if self.charge_current_threshold is not None:
            return self
        return replace(self, charge_current_threshold=0.05 * nominal_capacity / 3600.0)

    @property
    def threshold(self) -> float:
        if self.charge_current_threshold is None:
            raise ValueError("policy threshold unresolved; call resolved(nominal_capacity)")
        return self.charge_current_threshold


@dataclass(frozen=True)
class Window:
    s_a: float
    s_b: float
    charge: float  # tau * sum(u), As

    @property
    def delta_soc(self) -> float:
        return self.s_b - self.s_a

    @property
    def ratio_estimate(self) -> float:
        """Single-window capacity, charge throughput over SoC change."""
        return self.charge / self.delta_soc


@dataclass(frozen=True)
class SegmentAccumulator:
    active: bool = False
    s_a: float = 0.0
    charge_sum: float = 0.0
    start_index: int = 0
    sample_count: int = 0
    gap_run: int = 0
    # SoC estimate of the previous sample; a window starts from here
    s_last: float = 0.0
    index: int = 0

    @classmethod
    def starting_at(cls, s0: float) -> "SegmentAccumulator":
        return cls(s_last=float(s0))

    def to_array(self) -> np.ndarray:
        a = np.empty(K.ACC_SIZE)
        a[K.ACC_ACTIVE] = 1.0 if self.active else 0.0
        a[K.ACC_S_A] = self.s_a
        a[K.ACC_Q] = self.charge_sum
        a[K.ACC_START] = self.start_index
        a[K.ACC_COUNT] = self.sample_count
        a[K.ACC_GAP] = self.gap_run
        a[K.ACC_S_LAST] = self.s_last
        return a

    @classmethod
    def from_array(cls, a: np.ndarray, index: int) -> "SegmentAccumulator":
        return cls(
            active=bool(a[K.ACC_ACTIVE]),
            s_a=float(a[K.ACC_S_A]),
            charge_sum=float(a[K.ACC_Q]),
            start_index=int(a[K.ACC_START]),
            sample_count=int(a[K.ACC_COUNT]),
            gap_run=int(a[K.ACC_GAP]),
            s_last=float(a[K.ACC_S_LAST]),
            index=index,
        )


def segment_step(acc: SegmentAccumulator, policy: SegmentPolicy, u: float,
                 s_hat: float) -> tuple[SegmentAccumulator, Optional[Window], Optional[SegmentEvent]]:
    """Feed one sample (current and SoC estimate) to the segment detector.

    ChargeOnly: a session opens on current above threshold and closes after
    more than ``max_gap_samples`` consecutive samples at or below it; the
    window is emitted only when its SoC rise exceeds ``min_delta_soc``.
    AnySoCWindow: windows are chained back to back and close as soon as
    the absolute SoC change exceeds ``min_delta_soc``.
    """
    arr = acc.to_array()
    win = np.zeros(3)
    code = K.segment_step_inplace(arr, float(acc.index), float(u), float(s_hat), policy.mode.code,
                                  policy.min_delta_soc, policy.threshold, float(policy.max_gap_samples),
                                  policy.tau, win)
    new = SegmentAccumulator.from_array(arr, acc.index + 1)
    window = Window(float(win[0]), float(win[1]), float(win[2])) if code == K.EVT_ACCEPTED else None
    return new, window, EVENT_FROM_CODE[code]


@dataclass(frozen=True)
class RlsState:
    c_hat: float  # As
    p: float
    lam: float = 0.7
    window_count: int = 0

    def __post_init__(self):
        if not self.c_hat > 0:
            raise ValueError(f"c_hat must be positive, got {self.c_hat}")
        if not self.p > 0:
            raise ValueError(f"p must be positive, got {self.p}")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam}")

    def to_array(self) -> np.ndarray:
        return np.array([self.c_hat, self.p, self.lam, float(self.window_count)])

    @classmethod
    def from_array(cls, a: np.ndarray) -> "RlsState":
        # no validation: a recursion driven by inconsistent windows may go negative
        obj = object.__new__(cls)
        object.__setattr__(obj, "c_hat", float(a[K.RLS_C]))
        object.__setattr__(obj, "p", float(a[K.RLS_P]))
        object.__setattr__(obj, "lam", float(a[K.RLS_LAMBDA]))
        object.__setattr__(obj, "window_count", int(a[K.RLS_N]))
        return obj


def rls_update(rls: RlsState, w: Window) -> RlsState:
    """Scalar recursive least squares with exponential forgetting.

    ``p = inf`` is treated as an exactly diffuse prior: the first window
    then yields ``charge / delta_soc`` with no prior contamination.
    """
    d = w.delta_soc
    if d == 0.0:
        raise DegenerateWindowError("window has zero SoC change")
    arr = rls.to_array()
    K.rls_update_inplace(arr, float(w.charge), float(d))
    return RlsState.from_array(arr)


def batch_ls_oracle(windows: Sequence[Window], lam: float, c_init: float, p_init: float) -> float:
    """Closed-form minimizer of the exponentially weighted window cost.

    Minimizes ``lam**n (C - c_init)**2 / p_init + sum_j lam**(n-j) (q_j - C d_j)**2``,
    which is exactly what the recursion tracks. Test oracle only.
    """
    n = len(windows)
    if n == 0:
        raise ValueError("need at least one window")
    prior_w = 0.0 if math.isinf(p_init) else lam**n / p_init
    num = prior_w * c_init
    den = prior_w
    for j, w in enumerate(windows, start=1):
        weight = lam ** (n - j)
        d = w.delta_soc
        num += weight * d * w.charge
        den += weight * d * d
    if den == 0.0:
        raise np.linalg.LinAlgError("weighted normal equation is singular")
    return num / den
