"""Synthetic truth cell and cycle generator.

The truth cell is the same discrete 1-RC model the estimator assumes,
run at tau = 1 s on exact coulomb counting, so every estimate can be
compared against known ground truth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Union

import numpy as np

from . import _kernels as K
from .io import Telemetry
from .model import EcmParams, EmfCurve, ThetaParams, ecm_for_theta1, ecm_to_theta

TAU = 1.0
PULSE_BLOCK_S = 10

# 21 points on a 5 % grid, 3.0-4.2 V; nearly flat between 0.75 and 0.85
DEFAULT_EMF_VOLTAGES = (
    3.000, 3.300, 3.420, 3.490, 3.540, 3.580, 3.610, 3.640, 3.670, 3.710, 3.760,
    3.820, 3.880, 3.930, 3.965, 3.990, 4.000, 4.010, 4.060, 4.130, 4.200,
)

NOMINAL_CAPACITY_AH = 4.72
NOMINAL_R0 = 0.0176
NOMINAL_R1 = 0.010


class InfeasiblePhaseError(RuntimeError):
    pass


def default_emf() -> EmfCurve:
    return EmfCurve(np.linspace(0.0, 1.0, len(DEFAULT_EMF_VOLTAGES)), np.array(DEFAULT_EMF_VOLTAGES))


def default_ecm(capacity_ah: float = NOMINAL_CAPACITY_AH) -> EcmParams:
    """Truth ECM whose discrete relaxation rate is exactly 0.99 at tau = 1 s."""
    return ecm_for_theta1(NOMINAL_R0, NOMINAL_R1, capacity_ah * 3600.0, theta1=0.99, tau=TAU)


@dataclass(frozen=True)
class TruthCellConfig:
    ecm: EcmParams = field(default_factory=default_ecm)
    emf: EmfCurve = field(default_factory=default_emf)
    s_init: float = 0.9
    voltage_noise_std: float = 1e-3
    current_noise_std: float = 0.0
    seed: int = 0
    o_init: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.s_init <= 1.0:
            raise ValueError(f"s_init must lie in [0, 1], got {self.s_init}")
        if self.voltage_noise_std < 0 or self.current_noise_std < 0:
            raise ValueError("noise levels must be >= 0")

    @property
    def theta(self) -> ThetaParams:
        return ecm_to_theta(self.ecm, TAU)

    def to_dict(self) -> dict:
        return {
            "ecm": asdict(self.ecm),
            "emf": [list(p) for p in self.emf.points],
            "s_init": self.s_init,
            "voltage_noise_std": self.voltage_noise_std,
            "current_noise_std": self.current_noise_std,
            "seed": self.seed,
            "o_init": self.o_init,
            "tau": TAU,
            "theta": {k: getattr(self.theta, k) for k in ("theta1", "theta2", "theta3", "capacity")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TruthCellConfig":
        return cls(
            ecm=EcmParams(**d["ecm"]),
            emf=EmfCurve.from_points(d["emf"]),
            s_init=d.get("s_init", 0.9),
            voltage_noise_std=d.get("voltage_noise_std", 1e-3),
            current_noise_std=d.get("current_noise_std", 0.0),
            seed=d.get("seed", 0),
            o_init=d.get("o_init", 0.0),
        )


def aging_variant(cell: TruthCellConfig, capacity_scale: float, r_scale: float) -> TruthCellConfig:
    """Copy of ``cell`` with capacity and both resistances scaled."""
    if not (capacity_scale > 0 and r_scale > 0):
        raise ValueError("scales must be positive")
    ecm = cell.ecm
    aged = EcmParams(r0=ecm.r0 * r_scale, r1=ecm.r1 * r_scale, c1=ecm.c1,
                     capacity=ecm.capacity * capacity_scale)
    return replace(cell, ecm=aged)


@dataclass(frozen=True)
class DrivePulse:
    duration: float  # s
    mean: float  # A, negative = discharge
    variability: float  # A, std of the 10 s blocks

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("DrivePulse duration must be positive")
        if not self.mean < 0:
            raise ValueError("DrivePulse mean must be negative (discharge)")
        if not self.variability >= 0:
            raise ValueError("DrivePulse variability must be >= 0")


@dataclass(frozen=True)
class Rest:
    duration: float

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("Rest duration must be positive")


@dataclass(frozen=True)
class CcCharge:
    current: float  # A
    target_voltage: float  # V

    def __post_init__(self):
        if not self.current > 0:
            raise ValueError("CcCharge current must be positive")


@dataclass(frozen=True)
class CvHold:
    target_voltage: float
    cutoff_current: float

    def __post_init__(self):
        if not self.cutoff_current > 0:
            raise ValueError("CvHold cutoff current must be positive")


Phase = Union[DrivePulse, Rest, CcCharge, CvHold]

_PHASE_TYPES = {"drive": DrivePulse, "rest": Rest, "cc": CcCharge, "cv": CvHold}
_PHASE_NAMES = {v: k for k, v in _PHASE_TYPES.items()}


@dataclass(frozen=True)
class CycleSpec:
    phases: tuple[Phase, ...]
    repeat_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise ValueError("cycle spec has no phases")
        if self.repeat_count < 1:
            raise ValueError("repeat_count must be >= 1")

    def to_dict(self) -> dict:
        return {
            "repeat_count": self.repeat_count,
            "phases": [{"type": _PHASE_NAMES[type(p)], **asdict(p)} for p in self.phases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CycleSpec":
        phases = []
        for i, p in enumerate(d["phases"]):
            p = dict(p)
            kind = p.pop("type", None)
            if kind not in _PHASE_TYPES:
                raise ValueError(f"phase {i}: unknown type {kind!r}")
            phases.append(_PHASE_TYPES[kind](**p))
        return cls(tuple(phases), int(d.get("repeat_count", 1)))


def drive_charge_cycle(capacity_ah: float = NOMINAL_CAPACITY_AH, discharge_s: float = 1800.0,
                       discharge_c_rate: float = 0.9, charge_c_rate: float = 1.0,
                       rest_s: float = 600.0, repeat_count: int = 1) -> CycleSpec:
    """Pulsed discharge, rest, CC-CV charge to 4.2 V, rest."""
    i1c = capacity_ah
    return CycleSpec((
        DrivePulse(discharge_s, -discharge_c_rate * i1c, 0.8 * i1c),
        Rest(rest_s),
        CcCharge(charge_c_rate * i1c, 4.2),
        CvHold(4.2, 0.05 * i1c),
        Rest(rest_s),
    ), repeat_count)


def default_cycle_spec(repeat_count: int = 10) -> CycleSpec:
    """Desk-scale stand-in for the drive/charge cycling, roughly 2 h per cycle at C/3 discharge."""
    return drive_charge_cycle(discharge_s=3600.0, discharge_c_rate=1 / 3, charge_c_rate=0.5,
                              rest_s=600.0, repeat_count=repeat_count)


@dataclass
class SimulationResult:
    telemetry: Telemetry  # measured (noisy) samples
    soc: np.ndarray  # true SoC after each sample
    overpotential: np.ndarray  # true o after each sample
    current_true: np.ndarray
    voltage_true: np.ndarray
    phase_index: np.ndarray
    theta: ThetaParams
    cell: TruthCellConfig

    def __len__(self) -> int:
        return len(self.telemetry)

    @property
    def t(self) -> np.ndarray:
        return self.telemetry.t

    def coulomb_reference_soc(self) -> np.ndarray:
        """SoC by counting measured current on the true capacity."""
        return self.cell.s_init + np.cumsum(self.telemetry.u) * TAU / self.theta.capacity


class _Cell:
    def __init__(self, cell: TruthCellConfig):
        th = cell.theta
        self.th1, self.th2, self.th3, self.cap = th.theta1, th.theta2, th.theta3, th.capacity
        self.ks, self.kv, self.sl = cell.emf.soc, cell.emf.voltage, cell.emf.slopes
        self.s = cell.s_init
        self.o = cell.o_init

    def g(self, s: float) -> float:
        return K.emf_value(self.ks, self.kv, self.sl, s)

    def peek(self, u: float) -> tuple[float, float, float]:
        s = self.s + TAU / self.cap * u
        o = self.th1 * self.o + self.th2 * u
        return s, o, self.g(s) + o + self.th3 * u

    def cv_current(self, v_target: float) -> float:
        """Current that puts the next terminal voltage exactly at ``v_target``."""
        b = TAU / self.cap
        base = self.th1 * self.o
        j = K.emf_segment(self.ks, self.s)
        n = self.ks.shape[0]
        for _ in range(n):
            slope = self.sl[j]
            u = (v_target - base - self.kv[j] - slope * (self.s - self.ks[j])) / (slope * b + self.th2 + self.th3)
            s_new = self.s + b * u
            if s_new > self.ks[j + 1] and j < n - 2:
                j += 1
            elif s_new < self.ks[j] and j > 0:
                j -= 1
            else:
                return u
        return u


def generate_cycle(spec: CycleSpec, cell: TruthCellConfig) -> SimulationResult:
    """Simulate ``spec`` on the truth cell at 1 s resolution."""
    ss = np.random.SeedSequence(cell.seed)
    profile_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    c = _Cell(cell)
    cur, soc, ovp, volt, phase = [], [], [], [], []

    def apply(u: float, pidx: int) -> None:
        s, o, y = c.peek(u)
        if not -1e-12 <= s <= 1.0 + 1e-12:
            raise InfeasiblePhaseError(f"phase {pidx}: SoC left [0, 1] (s={s:.4f})")
        c.s, c.o = s, o
        cur.append(u)
        soc.append(s)
        ovp.append(o)
        volt.append(y)
        phase.append(pidx)

    nph = len(spec.phases)
    for rep in range(spec.repeat_count):
        for i, ph in enumerate(spec.phases):
            pidx = rep * nph + i
            if isinstance(ph, Rest):
                for _ in range(int(round(ph.duration / TAU))):
                    apply(0.0, pidx)
            elif isinstance(ph, DrivePulse):
                steps = int(round(ph.duration / TAU))
                nblocks = -(-steps // PULSE_BLOCK_S)
                levels = ph.mean + ph.variability * profile_rng.standard_normal(nblocks)
                for k in range(steps):
                    apply(float(levels[k // PULSE_BLOCK_S]), pidx)
            elif isinstance(ph, CcCharge):
                if ph.target_voltage <= c.g(c.s):
                    raise InfeasiblePhaseError(
                        f"phase {pidx}: CC target {ph.target_voltage} V is not above the EMF "
                        f"{c.g(c.s):.4f} V")
                while c.peek(ph.current)[2] < ph.target_voltage:
                    apply(ph.current, pidx)
            elif isinstance(ph, CvHold):
                if ph.target_voltage <= c.g(c.s):
                    raise InfeasiblePhaseError(
                        f"phase {pidx}: CV target {ph.target_voltage} V is not above the EMF "
                        f"{c.g(c.s):.4f} V")
                while True:
                    u = c.cv_current(ph.target_voltage)
                    if u < ph.cutoff_current:
                        break
                    apply(u, pidx)
            else:
                raise TypeError(f"unknown phase {ph!r}")

    n = len(cur)
    u_true = np.array(cur, dtype=float)
    y_true = np.array(volt, dtype=float)
    t = np.arange(n, dtype=float) * TAU
    u_meas = u_true + (cell.current_noise_std * noise_rng.standard_normal(n) if cell.current_noise_std > 0 else 0.0)
    y_meas = y_true + (cell.voltage_noise_std * noise_rng.standard_normal(n) if cell.voltage_noise_std > 0 else 0.0)
    return SimulationResult(
        telemetry=Telemetry(t, u_meas, y_meas),
        soc=np.array(soc, dtype=float),
        overpotential=np.array(ovp, dtype=float),
        current_true=u_true,
        voltage_true=y_true,
        phase_index=np.array(phase, dtype=int),
        theta=cell.theta,
        cell=cell,
    )
