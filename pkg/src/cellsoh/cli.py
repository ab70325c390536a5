"""Command-line interface.

Exit codes: 0 success, 2 input/parse error, 3 estimator abort,
4 stream pacing fell behind by more than ten sample periods.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import queue
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, TextIO

from .capacity import SegmentMode, SegmentPolicy
from .io import (InputError, TelemetryError, load_emf_csv, parse_telemetry_csv, read_json,
                 write_emf_csv, write_json, write_telemetry_csv, write_truth_csv)
from .jekf import CovarianceError, JekfConfig, JekfConfigError
from .model import EcmParams, EmfCurve, Sample
from .pipeline import (EstimateRecord, OnlineEstimator, PipelineConfig, pipeline_run,
                       run_aging_suite, write_records_csv)
from .simulator import (CycleSpec, InfeasiblePhaseError, TruthCellConfig, aging_variant, default_cycle_spec,
                        default_ecm, default_emf, generate_cycle)

log = logging.getLogger("cellsoh")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PIPELINE = 3
EXIT_BEHIND = 4

SCHEMA_VERSION = 1
COMMANDS = ("simulate", "estimate", "stream", "aging-suite")
LAG_LIMIT_SAMPLES = 10

# override key -> (type, default)
DEFAULTS = {
    "gamma": (float, 0.999),
    "lambda": (float, 0.7),
    "theta1": (float, 0.99),
    "estimate_theta1": (bool, False),
    "meas_noise_var": (float, 2.5e-5),
    "innovation_gate": (float, 0.0),
    "segment_mode": (str, "charge-only"),
    "min_delta_soc": (float, 0.2),
    "charge_threshold_a": (float, None),
    "max_gap_samples": (int, 5),
    "capacity_updates": (bool, True),
    "rls_p0": (float, 1e9),
    "nominal_capacity_ah": (float, None),
    "downsample": (int, 1),
    "flip_current": (bool, False),
    "pace": (float, 0.0),
    "seed": (int, 0),
    "tau": (float, 1.0),
}


class UsageError(InputError):
    pass


def _coerce(key: str, value):
    typ = DEFAULTS[key][0]
    if value is None:
        return None
    if typ is bool and isinstance(value, str):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"override {key}: expected a boolean, got {value!r}")
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise UsageError(f"override {key}: cannot interpret {value!r} as {typ.__name__}") from None


@dataclass
class RunManifest:
    command: str
    inputs: list[str] = field(default_factory=list)
    emf: Optional[str] = None
    out: Optional[str] = None
    overrides: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = read_json(path)
        if not isinstance(d, dict):
            raise InputError(f"{path}: manifest must be a JSON object")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InputError(f"{path}: unsupported schema_version {d.get('schema_version')!r}")
        if d.get("command") not in COMMANDS:
            raise InputError(f"{path}: unknown command {d.get('command')!r}")
        unknown = set(d.get("overrides", {})) - set(DEFAULTS)
        if unknown:
            raise InputError(f"{path}: unknown override keys {sorted(unknown)}")
        base = Path(path).parent
        resolve = lambda p: str((base / p) if not Path(p).is_absolute() else Path(p))  # noqa: E731
        m = cls(command=d["command"], inputs=[resolve(p) for p in d.get("inputs", [])],
                emf=resolve(d["emf"]) if d.get("emf") else None, out=d.get("out"),
                overrides=dict(d.get("overrides", {})), schema_version=d["schema_version"])
        for p in m.inputs + ([m.emf] if m.emf else []):
            if p != "-" and not Path(p).exists():
                raise InputError(f"{path}: referenced path {p} does not exist")
        return m


def resolve_options(args, manifest: Optional[RunManifest]) -> dict:
    """CLI flag > manifest override > built-in default."""
    cli = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip().replace("-", "_")
        if k not in DEFAULTS:
            raise UsageError(f"unknown override key {k!r}")
        cli[k] = _coerce(k, v)
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            cli[k] = v
    opts = {}
    for k, (_, default) in DEFAULTS.items():
        if k in cli:
            opts[k] = cli[k]
        elif manifest is not None and k in manifest.overrides:
            opts[k] = _coerce(k, manifest.overrides[k])
        else:
            opts[k] = default
    return opts


def build_pipeline_config(opts: dict, emf: EmfCurve, emf_path: Optional[str]) -> PipelineConfig:
    nominal_ah = opts["nominal_capacity_ah"]
    if nominal_ah is None:
        raise UsageError("nominal capacity is required (--nominal-capacity-ah)")
    try:
        jekf = JekfConfig(gamma=opts["gamma"], theta1_fixed=opts["theta1"], tau=opts["tau"],
                          meas_noise_var=opts["meas_noise_var"], estimate_theta1=opts["estimate_theta1"],
                          innovation_gate=opts["innovation_gate"])
        policy = SegmentPolicy(mode=SegmentMode(opts["segment_mode"]), min_delta_soc=opts["min_delta_soc"],
                               charge_current_threshold=opts["charge_threshold_a"],
                               max_gap_samples=opts["max_gap_samples"], tau=opts["tau"])
        return PipelineConfig(emf=emf, nominal_capacity=nominal_ah * 3600.0, jekf=jekf, policy=policy,
                              rls_lambda=opts["lambda"], rls_p0=opts["rls_p0"],
                              capacity_updates_enabled=opts["capacity_updates"], emf_path=emf_path)
    except (JekfConfigError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _add_estimator_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("estimator")
    g.add_argument("--emf", help="EMF curve CSV (soc,voltage_v)")
    g.add_argument("--nominal-capacity-ah", dest="nominal_capacity_ah", type=float)
    g.add_argument("--gamma", type=float, help="JEKF forgetting factor (default 0.999)")
    g.add_argument("--lambda", dest="lambda", type=float, help="RLS forgetting factor (default 0.7)")
    g.add_argument("--theta1", type=float, help="fixed relaxation rate (default 0.99)")
    g.add_argument("--estimate-theta1", dest="estimate_theta1", action="store_const", const=True)
    g.add_argument("--meas-noise-var", dest="meas_noise_var", type=float)
    g.add_argument("--innovation-gate", dest="innovation_gate", type=float)
    g.add_argument("--segment-mode", dest="segment_mode", choices=[m.value for m in SegmentMode])
    g.add_argument("--min-delta-soc", dest="min_delta_soc", type=float)
    g.add_argument("--charge-threshold-a", dest="charge_threshold_a", type=float)
    g.add_argument("--max-gap-samples", dest="max_gap_samples", type=int)
    g.add_argument("--no-capacity-updates", dest="capacity_updates", action="store_const", const=False)
    g.add_argument("--downsample", type=int)
    g.add_argument("--flip-current", dest="flip_current", action="store_const", const=True,
                   help="input uses discharge-positive current")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="generic override")
    g.add_argument("--manifest", help="JSON run manifest (schema_version 1)")
    g.add_argument("--out", help="output directory")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellsoh", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic telemetry corpus")
    p.add_argument("--spec", help="cycle spec JSON (default: built-in drive/charge cycles)")
    p.add_argument("--repeat", type=int, help="override the spec repeat count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--capacity-ah", type=float)
    p.add_argument("--r0", type=float)
    p.add_argument("--r1", type=float)
    p.add_argument("--c1", type=float)
    p.add_argument("--capacity-scale", type=float, default=1.0)
    p.add_argument("--r-scale", type=float, default=1.0)
    p.add_argument("--s-init", type=float)
    p.add_argument("--voltage-noise-std", type=float)
    p.add_argument("--current-noise-std", type=float)
    p.add_argument("--emf", help="truth EMF CSV (default: built-in curve)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("estimate", help="run the estimator offline over a telemetry file")
    p.add_argument("telemetry", nargs="?")
    _add_estimator_flags(p)

    p = sub.add_parser("stream", help="paced replay with a line protocol on stdout")
    p.add_argument("telemetry", nargs="?", help="telemetry CSV, or - for standard input")
    p.add_argument("--pace", type=float, help="replay speed factor; 0 = as fast as possible")
    _add_estimator_flags(p)

    p = sub.add_parser("aging-suite", help="compare datasets recorded at successive aging stages")
    p.add_argument("telemetry", nargs="*")
    p.add_argument("--labels", help="comma-separated dataset labels")
    _add_estimator_flags(p)
    return parser


def _load_inputs(args, manifest: Optional[RunManifest]):
    emf_path = args.emf or (manifest.emf if manifest else None)
    if not emf_path:
        raise UsageError("an EMF curve is required (--emf)")
    return load_emf_csv(emf_path), emf_path


def _out_dir(args, manifest) -> Optional[Path]:
    out = args.out or (manifest.out if manifest else None)
    if out is None:
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _inputs(args, manifest) -> list[str]:
    given = args.telemetry
    if isinstance(given, str):
        given = [given]
    given = [g for g in (given or []) if g]
    if given:
        return given
    return list(manifest.inputs) if manifest else []


def cmd_estimate(args, manifest=None, stdout: Optional[TextIO] = None) -> int:
    stdout = stdout or sys.stdout
    opts = resolve_options(args, manifest)
    emf, emf_path = _load_inputs(args, manifest)
    inputs = _inputs(args, manifest)
    if len(inputs) != 1:
        raise UsageError("estimate takes exactly one telemetry file")
    cfg = build_pipeline_config(opts, emf, emf_path)
    tel = parse_telemetry_csv(inputs[0], downsample=opts["downsample"], flip_current=opts["flip_current"])
    out = _out_dir(args, manifest)
    try:
        result = pipeline_run(tel, cfg)
    except (CovarianceError, TelemetryError) as exc:
        print(f"error: estimator aborted: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    summary = result.summary.to_dict()
    if out is not None:
        write_records_csv(out / "records.csv", result)
        write_json(out / "summary.json", summary)
        write_json(out / "config.json", {"telemetry": inputs[0], **cfg.to_dict(),
                                         "downsample": opts["downsample"], "flip_current": opts["flip_current"]})
    for k in sorted(summary):
        print(f"{k}={summary[k]}", file=stdout)
    return EXIT_OK


def _iter_stdin_samples(fh: TextIO, downsample: int, flip: bool) -> Iterator[Sample]:
    header = fh.readline()
    cols = [c.strip().lower() for c in header.split(",")]
    if cols[:3] != ["t_s", "current_a", "voltage_v"]:
        raise InputError(f"<stdin>: line 1: expected header 't_s,current_a,voltage_v', got {header.strip()!r}")
    group_u = []
    for lineno, line in enumerate(fh, start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            t, u, y = float(parts[0]), float(parts[1]), float(parts[2])
        except (ValueError, IndexError):
            raise InputError(f"<stdin>: line {lineno}: malformed row {line.strip()!r}") from None
        u = -u if flip else u
        group_u.append(u)
        if len(group_u) == downsample:
            yield Sample(t, math.fsum(group_u) / downsample, y)
            group_u = []
    if group_u:
        # partial trailing group, handled like the file reader does
        yield Sample(t, math.fsum(group_u) / downsample, y)


class _Behind(Exception):
    pass


def _format_line(r: EstimateRecord) -> str:
    return (f"t={r.t:g} soc={r.s_hat:.6f} c_ah={r.c_hat / 3600.0:.6f} theta2_mohm={r.theta2 * 1e3:.6f} "
            f"theta3_mohm={r.theta3 * 1e3:.6f} yhat_v={r.y_hat:.6f}")


def cmd_stream(args, manifest=None, stdout: Optional[TextIO] = None) -> int:
    stdout = stdout or sys.stdout
    opts = resolve_options(args, manifest)
    emf, emf_path = _load_inputs(args, manifest)
    inputs = _inputs(args, manifest)
    if len(inputs) != 1:
        raise UsageError("stream takes exactly one telemetry source")
    pace = opts["pace"]
    if pace < 0:
        raise UsageError("--pace must be >= 0")
    cfg = build_pipeline_config(opts, emf, emf_path)
    if inputs[0] == "-":
        source: Iterator[Sample] = _iter_stdin_samples(sys.stdin, opts["downsample"], opts["flip_current"])
    else:
        source = iter(parse_telemetry_csv(inputs[0], downsample=opts["downsample"],
                                          flip_current=opts["flip_current"]))
    out = _out_dir(args, manifest)
    tau = cfg.jekf.tau

    q: queue.Queue = queue.Queue(maxsize=256)
    done = object()
    stop = threading.Event()

    def producer():
        try:
            t_wall0 = time.monotonic()
            t0 = None
            for s in source:
                if stop.is_set():
                    return
                if t0 is None:
                    t0 = s.t
                due = t_wall0 + (s.t - t0) / pace if pace > 0 else None
                if due is not None:
                    delay = due - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
                q.put((s, due))
            q.put((done, None))
        except BaseException as exc:  # handed to the consumer
            q.put((exc, None))

    th = threading.Thread(target=producer, name="cellsoh-producer", daemon=True)
    th.start()
    est = OnlineEstimator(cfg)
    records = []
    code = EXIT_OK
    try:
        while True:
            item, due = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            rec = est.step(item)
            records.append(rec)
            stdout.write(_format_line(rec) + "\n")
            if rec.segment_event is not None:
                stdout.write(f"event={rec.segment_event.value} t={rec.t:g} c_ah={rec.c_hat / 3600.0:.6f}\n")
            if rec.stability_flag:
                stdout.write(f"event=stability_flag t={rec.t:g} theta1={rec.theta1:.9f}\n")
            stdout.flush()
            if due is not None and (time.monotonic() - due) * pace > LAG_LIMIT_SAMPLES * tau:
                raise _Behind(f"pacing fell behind by more than {LAG_LIMIT_SAMPLES} samples at t={rec.t:g}")
    except _Behind as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_BEHIND
    except (CovarianceError, TelemetryError) as exc:
        print(f"error: estimator aborted: {exc}", file=sys.stderr)
        code = EXIT_PIPELINE
    finally:
        stop.set()
        # unblock a producer waiting on a full queue
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(0.01)
    if out is not None:
        write_records_csv(out / "records.csv", records)
        write_json(out / "summary.json", est.summary().to_dict())
        write_json(out / "config.json", {"telemetry": inputs[0], "pace": pace, **cfg.to_dict()})
    return code


def cmd_aging_suite(args, manifest=None, stdout: Optional[TextIO] = None) -> int:
    stdout = stdout or sys.stdout
    opts = resolve_options(args, manifest)
    emf, emf_path = _load_inputs(args, manifest)
    inputs = _inputs(args, manifest)
    if len(inputs) < 2:
        raise UsageError("aging-suite needs at least two telemetry files")
    labels = args.labels.split(",") if args.labels else [Path(p).parent.name or Path(p).stem for p in inputs]
    cfg = build_pipeline_config(opts, emf, emf_path)
    data = [parse_telemetry_csv(p, downsample=opts["downsample"], flip_current=opts["flip_current"])
            for p in inputs]
    try:
        report = run_aging_suite(data, cfg, labels=labels)
    except (CovarianceError, TelemetryError) as exc:
        print(f"error: estimator aborted: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    out = _out_dir(args, manifest)
    table = report.to_table()
    if out is not None:
        (out / "aging_report.txt").write_text(table)
        write_json(out / "aging_report.json", report.to_dict())
        write_json(out / "config.json", {"telemetry": inputs, **cfg.to_dict()})
    stdout.write(table)
    return EXIT_OK


def cmd_simulate(args, stdout: Optional[TextIO] = None) -> int:
    stdout = stdout or sys.stdout
    if args.spec:
        try:
            spec = CycleSpec.from_dict(read_json(args.spec))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{args.spec}: invalid cycle spec: {exc}") from exc
    else:
        spec = default_cycle_spec()
    if args.repeat is not None:
        spec = CycleSpec(spec.phases, args.repeat)
    emf = load_emf_csv(args.emf) if args.emf else default_emf()
    base = default_ecm(args.capacity_ah) if args.capacity_ah else default_ecm()
    try:
        ecm = EcmParams(r0=args.r0 if args.r0 is not None else base.r0,
                        r1=args.r1 if args.r1 is not None else base.r1,
                        c1=args.c1 if args.c1 is not None else base.c1, capacity=base.capacity)
        cell = TruthCellConfig(ecm=ecm, emf=emf, seed=args.seed,
                               **{k: v for k, v in (("s_init", args.s_init),
                                                    ("voltage_noise_std", args.voltage_noise_std),
                                                    ("current_noise_std", args.current_noise_std))
                                  if v is not None})
        cell = aging_variant(cell, args.capacity_scale, args.r_scale)
        sim = generate_cycle(spec, cell)
    except InfeasiblePhaseError as exc:
        raise InputError(f"infeasible cycle spec: {exc}") from exc
    except ValueError as exc:
        raise InputError(f"invalid cell configuration: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_telemetry_csv(out / "telemetry.csv", sim.telemetry)
    write_truth_csv(out / "truth.csv", sim.t, sim.soc, sim.overpotential)
    write_emf_csv(out / "emf.csv", emf)
    write_json(out / "cell.json", cell.to_dict())
    write_json(out / "spec.json", spec.to_dict())
    print(f"samples={len(sim)} capacity_ah={cell.ecm.capacity_ah:.6g} out={out}", file=stdout)
    return EXIT_OK


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        manifest = RunManifest.load(args.manifest) if args.manifest else None
        if manifest is not None and manifest.command != args.command:
            raise UsageError(f"manifest is for '{manifest.command}', not '{args.command}'")
        handler = {"estimate": cmd_estimate, "stream": cmd_stream, "aging-suite": cmd_aging_suite}[args.command]
        return handler(args, manifest)
    except (InputError, TelemetryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BrokenPipeError:
        # downstream reader (e.g. `head`) went away; not an error of ours
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
