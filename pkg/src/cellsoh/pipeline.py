"""Coupled JEKF + segment-triggered RLS capacity estimator."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from . import _kernels as K
from .capacity import EVENT_FROM_CODE, RlsState, SegmentAccumulator, SegmentEvent, SegmentPolicy
from .io import PathLike, Telemetry, TelemetryError, as_telemetry
from .jekf import CovarianceError, JekfConfig, jekf_init
from .model import EmfCurve, Sample

log = logging.getLogger(__name__)

OVERPOTENTIAL_MARGIN_V = 0.5
REST_CHECK_S = 60.0


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    emf: EmfCurve
    nominal_capacity: float  # As
    jekf: JekfConfig = field(default_factory=JekfConfig)
    policy: SegmentPolicy = field(default_factory=SegmentPolicy)
    rls_lambda: float = 0.7
    rls_p0: float = 1e9
    capacity_updates_enabled: bool = True
    emf_path: Optional[str] = None

    def __post_init__(self):
        if not self.nominal_capacity > 0:
            raise ValueError(f"nominal_capacity must be positive, got {self.nominal_capacity}")
        if not 0.0 < self.rls_lambda <= 1.0:
            raise ValueError(f"rls_lambda must lie in (0, 1], got {self.rls_lambda}")
        if not self.rls_p0 > 0:
            raise ValueError("rls_p0 must be positive")
        if self.policy.tau != self.jekf.tau:
            raise ValueError("segment policy and JEKF must share the sample period")

    @property
    def resolved_policy(self) -> SegmentPolicy:
        return self.policy.resolved(self.nominal_capacity)

    def to_dict(self) -> dict:
        j, p = self.jekf, self.resolved_policy
        return {
            "gamma": j.gamma,
            "theta1": j.theta1_fixed,
            "estimate_theta1": j.estimate_theta1,
            "tau": j.tau,
            "meas_noise_var": j.meas_noise_var,
            "p0": list(j.p0_diagonal()),
            "x0": list(j.x0_overrides),
            "innovation_gate": j.innovation_gate,
            "segment_mode": p.mode.value,
            "min_delta_soc": p.min_delta_soc,
            "charge_current_threshold": p.charge_current_threshold,
            "max_gap_samples": p.max_gap_samples,
            "lambda": self.rls_lambda,
            "rls_p0": self.rls_p0,
            "capacity_updates_enabled": self.capacity_updates_enabled,
            "nominal_capacity_ah": self.nominal_capacity / 3600.0,
            "emf_path": self.emf_path,
        }


@dataclass(frozen=True)
class EstimateRecord:
    t: float
    s_hat: float  # clamped to [0, 1] for reporting
    o_hat: float
    theta1: float
    theta2: float
    theta3: float
    y_hat: float
    innovation: float
    c_hat: float  # As
    segment_event: Optional[SegmentEvent]
    stability_flag: bool


RECORD_COLUMNS = ("t_s", "soc", "overpotential_v", "theta1", "theta2_ohm", "theta3_ohm",
                  "yhat_v", "innovation_v", "c_hat_as", "c_hat_ah", "segment_event", "stability_flag")


def record_row(r: EstimateRecord) -> list[str]:
    return [repr(r.t), repr(r.s_hat), repr(r.o_hat), repr(r.theta1), repr(r.theta2), repr(r.theta3),
            repr(r.y_hat), repr(r.innovation), repr(r.c_hat), repr(r.c_hat / 3600.0),
            r.segment_event.value if r.segment_event else "", "1" if r.stability_flag else "0"]


@dataclass
class RunSummary:
    n_samples: int
    rms_voltage_error: float  # V
    c_hat_final: float  # As
    theta2_mean: float
    theta3_mean: float
    segments_opened: int
    segments_accepted: int
    segments_discarded: int
    stability_flags: int
    gated_updates: int
    rejected_capacity_updates: int
    capacity_updates_enabled: bool
    segment_mode: str

    @property
    def rms_mv(self) -> float:
        return self.rms_voltage_error * 1e3

    @property
    def c_hat_final_ah(self) -> float:
        return self.c_hat_final / 3600.0

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "rms_mv": self.rms_mv,
            "c_hat_final_ah": self.c_hat_final_ah,
            "c_hat_final_as": self.c_hat_final,
            "theta2_mean_mohm": self.theta2_mean * 1e3,
            "theta3_mean_mohm": self.theta3_mean * 1e3,
            "segments_opened": self.segments_opened,
            "segments_accepted": self.segments_accepted,
            "segments_discarded": self.segments_discarded,
            "stability_flags": self.stability_flags,
            "gated_updates": self.gated_updates,
            "rejected_capacity_updates": self.rejected_capacity_updates,
            "capacity_updates_enabled": self.capacity_updates_enabled,
            "segment_mode": self.segment_mode,
        }


@dataclass
class RunResult:
    """Per-sample estimates in column form plus the run summary."""

    t: np.ndarray
    y: np.ndarray
    s_raw: np.ndarray  # unclamped filter SoC
    o_hat: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray
    y_hat: np.ndarray
    innovation: np.ndarray
    c_hat: np.ndarray
    event: np.ndarray  # int8 codes, see _kernels.EVT_*
    flag: np.ndarray
    summary: RunSummary

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def s_hat(self) -> np.ndarray:
        return np.clip(self.s_raw, 0.0, 1.0)

    def record(self, k: int) -> EstimateRecord:
        return EstimateRecord(
            t=float(self.t[k]), s_hat=min(max(float(self.s_raw[k]), 0.0), 1.0), o_hat=float(self.o_hat[k]),
            theta1=float(self.theta1[k]), theta2=float(self.theta2[k]), theta3=float(self.theta3[k]),
            y_hat=float(self.y_hat[k]), innovation=float(self.innovation[k]), c_hat=float(self.c_hat[k]),
            segment_event=EVENT_FROM_CODE[int(self.event[k])], stability_flag=bool(self.flag[k]))

    def __iter__(self) -> Iterator[EstimateRecord]:
        for k in range(len(self)):
            yield self.record(k)

    @property
    def records(self) -> list[EstimateRecord]:
        return list(self)

    def window_closures(self) -> np.ndarray:
        return np.flatnonzero(self.event == K.EVT_ACCEPTED)


def write_records_csv(path: PathLike, records: Iterable[EstimateRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow(record_row(r))


def compute_rms_error(records: Union[RunResult, Sequence[EstimateRecord]], measured: Sequence[float]) -> float:
    """RMS of ``y - y_hat`` using the pre-correction prediction."""
    y_hat = records.y_hat if isinstance(records, RunResult) else np.array([r.y_hat for r in records], dtype=float)
    measured = np.asarray(measured, dtype=float)
    if y_hat.shape != measured.shape:
        raise ValueError(f"length mismatch: {y_hat.shape[0]} records vs {measured.shape[0]} measurements")
    if measured.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((measured - y_hat) ** 2)))


def _validate_stream(tel: Telemetry, cfg: PipelineConfig) -> None:
    if len(tel) == 0:
        raise TelemetryError("empty telemetry stream")
    tel.check_monotonic()
    if len(tel) > 1:
        dt = float(np.median(np.diff(tel.t)))
        if abs(dt - cfg.jekf.tau) > 0.01 * cfg.jekf.tau:
            log.warning("median sample spacing %.4g s differs from tau=%.4g s", dt, cfg.jekf.tau)
    lo, hi = cfg.emf.v_min - OVERPOTENTIAL_MARGIN_V, cfg.emf.v_max + OVERPOTENTIAL_MARGIN_V
    out = np.flatnonzero((tel.y < lo) | (tel.y > hi))
    if out.size:
        log.warning("%d samples outside the EMF span +- %.2f V (first at row %d)",
                    out.size, OVERPOTENTIAL_MARGIN_V, out[0] + 1)
    head = tel.t <= tel.t[0] + REST_CHECK_S
    if np.any(np.abs(tel.u[head]) > cfg.resolved_policy.threshold):
        log.info("current flows during the first %.0f s; the rest-start assumption is weak", REST_CHECK_S)


class OnlineEstimator:
    """Sample-at-a-time estimator; the first sample initializes the filter."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self._policy = cfg.resolved_policy
        self.x: Optional[np.ndarray] = None
        self.P: Optional[np.ndarray] = None
        self.ps = np.zeros(K.PS_SIZE)
        self.ps[K.PS_CAPACITY] = cfg.nominal_capacity
        self.acc = np.zeros(K.ACC_SIZE)
        self.rls = RlsState(cfg.nominal_capacity, cfg.rls_p0, cfg.rls_lambda).to_array()
        self._out = np.zeros(5)
        self.k = 0
        self._t_last = -math.inf
        self._sq_err = 0.0
        self._th2_sum = 0.0
        self._th3_sum = 0.0

    def _start(self, y: float) -> None:
        st = jekf_init(self.cfg.emf, y, self.cfg.nominal_capacity, self.cfg.jekf)
        self.x, self.P = st.x, st.P
        self.acc[K.ACC_S_LAST] = st.x[0]

    @property
    def capacity(self) -> float:
        return float(self.ps[K.PS_CAPACITY])

    @property
    def accumulator(self) -> SegmentAccumulator:
        return SegmentAccumulator.from_array(self.acc, self.k)

    @property
    def rls_state(self) -> RlsState:
        return RlsState.from_array(self.rls)

    def step(self, sample: Sample) -> EstimateRecord:
        if not sample.t > self._t_last:
            raise TelemetryError(f"row {self.k + 1}: timestamp {sample.t!r} does not increase "
                                 f"(previous {self._t_last!r})")
        if self.x is None:
            self._start(sample.y)
        c, j = self.cfg, self.cfg.jekf
        pol = self._policy
        out = self._out
        K.pipeline_step_inplace(self.x, self.P, self.ps, self.acc, self.rls, float(self.k), float(sample.u),
                                float(sample.y), c.emf.soc, c.emf.voltage, c.emf.slopes, j.tau,
                                j.theta1_fixed, j.gamma, j.meas_noise_var, j.innovation_gate,
                                pol.mode.code, pol.min_delta_soc, pol.threshold, float(pol.max_gap_samples),
                                c.capacity_updates_enabled, out)
        if out[4] == K.STEP_BAD_INNOVATION_VAR:
            raise CovarianceError(f"row {self.k + 1}: innovation variance is not positive")
        x = self.x
        rec = EstimateRecord(
            t=sample.t, s_hat=min(max(float(x[0]), 0.0), 1.0), o_hat=float(x[1]),
            theta1=float(x[4]) if x.shape[0] == 5 else j.theta1_fixed,
            theta2=float(x[2]), theta3=float(x[3]), y_hat=float(out[0]), innovation=float(out[1]),
            c_hat=float(self.ps[K.PS_CAPACITY]), segment_event=EVENT_FROM_CODE[int(out[2])],
            stability_flag=bool(out[3]))
        self.k += 1
        self._t_last = sample.t
        self._sq_err += rec.innovation * rec.innovation
        self._th2_sum += rec.theta2
        self._th3_sum += rec.theta3
        return rec

    def run(self, samples: Iterable[Sample]) -> Iterator[EstimateRecord]:
        for s in samples:
            yield self.step(s)

    def summary(self) -> RunSummary:
        n = max(self.k, 1)
        ps = self.ps
        return RunSummary(
            n_samples=self.k, rms_voltage_error=math.sqrt(self._sq_err / n), c_hat_final=float(ps[K.PS_CAPACITY]),
            theta2_mean=self._th2_sum / n, theta3_mean=self._th3_sum / n,
            segments_opened=int(ps[K.PS_OPENED]), segments_accepted=int(ps[K.PS_ACCEPTED]),
            segments_discarded=int(ps[K.PS_DISCARDED]), stability_flags=int(ps[K.PS_FLAGGED]),
            gated_updates=int(ps[K.PS_GATED]), rejected_capacity_updates=int(ps[K.PS_REJECTED_C]),
            capacity_updates_enabled=self.cfg.capacity_updates_enabled,
            segment_mode=self._policy.mode.value)


def pipeline_run(samples: Union[Telemetry, Iterable[Sample]], cfg: PipelineConfig) -> RunResult:
    """Run the coupled estimator over a whole stream.

    Emits one record per sample; accepted windows update the RLS estimate
    and, when enabled, the capacity the filter uses from the next sample on.
    """
    tel = as_telemetry(samples)
    _validate_stream(tel, cfg)
    est = OnlineEstimator(cfg)
    est._start(float(tel.y[0]))
    j, pol = cfg.jekf, est._policy
    n = len(tel)
    cols = {name: np.empty(n) for name in ("s", "o", "th1", "th2", "th3", "yhat", "innov", "c")}
    evt = np.zeros(n, dtype=np.int8)
    flag = np.zeros(n, dtype=np.bool_)
    fail = K.pipeline_run_kernel(
        tel.u, tel.y, est.x, est.P, est.ps, est.acc, est.rls, cfg.emf.soc, cfg.emf.voltage, cfg.emf.slopes,
        j.tau, j.theta1_fixed, j.gamma, j.meas_noise_var, j.innovation_gate, pol.mode.code,
        pol.min_delta_soc, pol.threshold, float(pol.max_gap_samples), cfg.capacity_updates_enabled,
        cols["s"], cols["o"], cols["th1"], cols["th2"], cols["th3"], cols["yhat"], cols["innov"], cols["c"],
        evt, flag)
    if fail >= 0:
        raise CovarianceError(f"row {fail + 1} (t={float(tel.t[fail])!r}): innovation variance is not positive")
    ps = est.ps
    # cumsum adds strictly in order, matching the streaming estimator's running sums bit for bit
    innov = cols["innov"]
    summary = RunSummary(
        n_samples=n,
        rms_voltage_error=math.sqrt(float(np.cumsum(innov * innov)[-1]) / n),
        c_hat_final=float(ps[K.PS_CAPACITY]),
        theta2_mean=float(np.cumsum(cols["th2"])[-1]) / n,
        theta3_mean=float(np.cumsum(cols["th3"])[-1]) / n,
        segments_opened=int(ps[K.PS_OPENED]), segments_accepted=int(ps[K.PS_ACCEPTED]),
        segments_discarded=int(ps[K.PS_DISCARDED]), stability_flags=int(ps[K.PS_FLAGGED]),
        gated_updates=int(ps[K.PS_GATED]), rejected_capacity_updates=int(ps[K.PS_REJECTED_C]),
        capacity_updates_enabled=cfg.capacity_updates_enabled, segment_mode=pol.mode.value)
    return RunResult(tel.t.copy(), tel.y.copy(), cols["s"], cols["o"], cols["th1"], cols["th2"], cols["th3"],
                     cols["yhat"], cols["innov"], cols["c"], evt, flag, summary)


@dataclass
class AgingRow:
    label: str
    c_hat_final_ah: float
    theta2_mean_mohm: float
    theta3_mean_mohm: float
    rms_mv: float


@dataclass
class AgingReport:
    rows: list[AgingRow]
    capacity_decreasing: bool
    theta2_increasing: bool
    theta3_increasing: bool

    def to_dict(self) -> dict:
        return {
            "rows": [vars(r).copy() for r in self.rows],
            "capacity_decreasing": self.capacity_decreasing,
            "theta2_increasing": self.theta2_increasing,
            "theta3_increasing": self.theta3_increasing,
        }

    def to_table(self) -> str:
        lines = [f"{'dataset':<24} {'C0 [Ah]':>9} {'theta2 [mOhm]':>14} {'theta3 [mOhm]':>14} {'rms [mV]':>9}"]
        for r in self.rows:
            lines.append(f"{r.label:<24} {r.c_hat_final_ah:>9.3f} {r.theta2_mean_mohm:>14.4f} "
                         f"{r.theta3_mean_mohm:>14.3f} {r.rms_mv:>9.3f}")
        lines.append(f"capacity decreasing: {'yes' if self.capacity_decreasing else 'no'}")
        lines.append(f"theta2 increasing:   {'yes' if self.theta2_increasing else 'no'}")
        lines.append(f"theta3 increasing:   {'yes' if self.theta3_increasing else 'no'}")
        return "\n".join(lines) + "\n"


def _strictly(values: Sequence[float], increasing: bool) -> bool:
    d = np.diff(np.asarray(values, dtype=float))
    return bool(np.all(d > 0) if increasing else np.all(d < 0))


def run_aging_suite(datasets: Sequence[Union[Telemetry, Iterable[Sample]]], cfg: PipelineConfig,
                    labels: Optional[Sequence[str]] = None) -> AgingReport:
    """Evaluate datasets in the given order and judge the aging trends."""
    if len(datasets) < 2:
        raise ValueError("aging suite needs at least two datasets")
    labels = list(labels) if labels is not None else [f"dataset_{i}" for i in range(len(datasets))]
    if len(labels) != len(datasets):
        raise ValueError("one label per dataset required")
    rows = []
    for label, data in zip(labels, datasets):
        s = pipeline_run(data, cfg).summary
        rows.append(AgingRow(label, s.c_hat_final_ah, s.theta2_mean * 1e3, s.theta3_mean * 1e3, s.rms_mv))
    return AgingReport(
        rows=rows,
        capacity_decreasing=_strictly([r.c_hat_final_ah for r in rows], increasing=False),
        theta2_increasing=_strictly([r.theta2_mean_mohm for r in rows], increasing=True),
        theta3_increasing=_strictly([r.theta3_mean_mohm for r in rows], increasing=True),
    )
