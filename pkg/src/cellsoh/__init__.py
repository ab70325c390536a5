"""Online SoC, impedance and capacity estimation from current/voltage telemetry."""

from .capacity import (RlsState, SegmentAccumulator, SegmentEvent, SegmentMode, SegmentPolicy, Window,
                       batch_ls_oracle, rls_update, segment_step)
from .io import Telemetry, load_emf_csv, parse_telemetry_csv
from .jekf import JekfConfig, JekfState, jekf_init, jekf_step, set_capacity, stability_guard
from .model import (EcmParams, EmfCurve, ModelState, Sample, ThetaParams, ecm_to_theta, emf_derivative,
                    emf_eval, emf_invert, model_output, model_step, theta_to_ecm)
from .pipeline import (AgingReport, EstimateRecord, OnlineEstimator, PipelineConfig, RunResult, RunSummary,
                       compute_rms_error, pipeline_run, run_aging_suite)
from .simulator import (CcCharge, CvHold, CycleSpec, DrivePulse, Rest, TruthCellConfig, aging_variant,
                        generate_cycle)

__version__ = "0.1.0"

__all__ = [
    "RlsState", "SegmentAccumulator", "SegmentEvent", "SegmentMode", "SegmentPolicy", "Window",
    "batch_ls_oracle", "rls_update", "segment_step", "Telemetry", "load_emf_csv", "parse_telemetry_csv",
    "JekfConfig", "JekfState", "jekf_init", "jekf_step", "set_capacity", "stability_guard", "EcmParams",
    "EmfCurve", "ModelState", "Sample", "ThetaParams", "ecm_to_theta", "emf_derivative", "emf_eval",
    "emf_invert", "model_output", "model_step", "theta_to_ecm", "AgingReport", "EstimateRecord",
    "OnlineEstimator", "PipelineConfig", "RunResult", "RunSummary", "compute_rms_error", "pipeline_run",
    "run_aging_suite", "CcCharge", "CvHold", "CycleSpec", "DrivePulse", "Rest", "TruthCellConfig",
    "aging_variant", "generate_cycle",
]
