"""Telemetry, EMF and report file formats."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import numpy as np

from .model import EmfCurve, EmfCurveError, Sample

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

TELEMETRY_HEADER = ("t_s", "current_a", "voltage_v")
TRUTH_HEADER = ("t_s", "soc_true", "overpotential_v")
EMF_HEADER = ("soc", "voltage_v")


class InputError(ValueError):
    """Malformed input file; the message names the file and line."""


class TelemetryError(ValueError):
    """Telemetry stream violates an ordering or content invariant."""


@dataclass
class Telemetry:
    """Column-oriented sample stream."""

    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    temp: Optional[np.ndarray] = None

    def __post_init__(self):
        self.t = np.ascontiguousarray(self.t, dtype=float)
        self.u = np.ascontiguousarray(self.u, dtype=float)
        self.y = np.ascontiguousarray(self.y, dtype=float)
        if self.temp is not None:
            self.temp = np.ascontiguousarray(self.temp, dtype=float)
        n = self.t.shape[0]
        if self.u.shape != (n,) or self.y.shape != (n,) or (self.temp is not None and self.temp.shape != (n,)):
            raise TelemetryError("telemetry columns must be 1-D and of equal length")

    def __len__(self) -> int:
        return self.t.shape[0]

    def __iter__(self) -> Iterator[Sample]:
        temp = self.temp
        for k in range(len(self)):
            yield Sample(float(self.t[k]), float(self.u[k]), float(self.y[k]),
                         None if temp is None else float(temp[k]))

    @classmethod
    def from_samples(cls, samples: Iterable[Sample]) -> "Telemetry":
        samples = list(samples)
        temps = [s.temp for s in samples]
        temp = None if all(v is None for v in temps) else np.array(
            [np.nan if v is None else v for v in temps], dtype=float)
        return cls(np.array([s.t for s in samples], dtype=float),
                   np.array([s.u for s in samples], dtype=float),
                   np.array([s.y for s in samples], dtype=float), temp)

    def check_monotonic(self, source: str = "telemetry", first_row: int = 1) -> None:
        """Raise naming the first row whose timestamp does not increase."""
        if len(self) and (not np.all(np.isfinite(self.t)) or self.t[0] < 0):
            bad = int(np.flatnonzero(~np.isfinite(self.t) | (self.t < 0))[0])
            raise TelemetryError(f"{source}: row {bad + first_row}: invalid timestamp {float(self.t[bad])!r}")
        dt = np.diff(self.t)
        bad = np.flatnonzero(~(dt > 0))
        if bad.size:
            k = int(bad[0]) + 1
            raise TelemetryError(
                f"{source}: row {k + first_row}: timestamp {float(self.t[k])!r} does not increase "
                f"(previous {float(self.t[k - 1])!r})")


def as_telemetry(samples) -> Telemetry:
    if isinstance(samples, Telemetry):
        return samples
    return Telemetry.from_samples(samples)


def _read_rows(path: Path):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"{path}: cannot open: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            yield lineno, [c.strip() for c in row]


def parse_telemetry_csv(path: PathLike, downsample: int = 1, flip_current: bool = False) -> Telemetry:
    """Read ``t_s,current_a,voltage_v[,temp_c]`` telemetry.

    ``downsample=N`` keeps every Nth row and replaces its current with the
    window's charge divided by N, so ``tau * sum(u)`` is preserved exactly
    at the new rate. A trailing partial window is kept the same way.
    """
    path = Path(path)
    if downsample < 1:
        raise InputError(f"{path}: downsample must be >= 1, got {downsample}")
    rows = _read_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise InputError(f"{path}: line 1: missing header") from None
    header = [h.lower() for h in header]
    if tuple(header[:3]) != TELEMETRY_HEADER or len(header) > 4 or (len(header) == 4 and header[3] != "temp_c"):
        raise InputError(f"{path}: line {lineno}: expected header "
                         f"'{','.join(TELEMETRY_HEADER)}[,temp_c]', got '{','.join(header)}'")
    has_temp = len(header) == 4
    t, u, y, temp, lines = [], [], [], [], []
    for lineno, row in rows:
        if len(row) != len(header):
            raise InputError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError:
            raise InputError(f"{path}: line {lineno}: non-numeric field in {row}") from None
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"{path}: line {lineno}: non-finite value")
        t.append(vals[0])
        u.append(vals[1])
        y.append(vals[2])
        if has_temp:
            temp.append(vals[3])
        lines.append(lineno)
    if not t:
        raise InputError(f"{path}: no data rows after header")
    tel = Telemetry(np.array(t), np.array(u), np.array(y), np.array(temp) if has_temp else None)
    try:
        tel.check_monotonic(str(path))
    except TelemetryError as exc:
        # re-express the row in file lines
        dt = np.diff(tel.t)
        bad = np.flatnonzero(~(dt > 0))
        k = int(bad[0]) + 1 if bad.size else 0
        raise TelemetryError(f"{path}: line {lines[k]}: timestamp {float(tel.t[k])!r} does not increase "
                             f"(previous {float(tel.t[k - 1])!r})") from exc
    if flip_current:
        tel.u = -tel.u
    if downsample > 1:
        tel = downsample_telemetry(tel, downsample)
    return tel


def downsample_telemetry(tel: Telemetry, n: int) -> Telemetry:
    """Keep every ``n``-th sample; current becomes window charge / ``n``."""
    m = len(tel)
    ends = np.arange(n - 1, m, n)
    if m % n:
        ends = np.append(ends, m - 1)
    starts = np.concatenate(([0], ends[:-1] + 1))
    # per-window exact sums; cumsum differences would leak rounding across windows
    u = np.array([math.fsum(tel.u[a:b + 1]) for a, b in zip(starts, ends)]) / n
    temp = None if tel.temp is None else tel.temp[ends]
    return Telemetry(tel.t[ends], u, tel.y[ends], temp)


def write_telemetry_csv(path: PathLike, tel: Telemetry) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if tel.temp is None:
            w.writerow(TELEMETRY_HEADER)
            for row in zip(tel.t, tel.u, tel.y):
                w.writerow([repr(float(v)) for v in row])
        else:
            w.writerow(TELEMETRY_HEADER + ("temp_c",))
            for row in zip(tel.t, tel.u, tel.y, tel.temp):
                w.writerow([repr(float(v)) for v in row])


def write_truth_csv(path: PathLike, t: np.ndarray, soc: np.ndarray, overpotential: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for row in zip(t, soc, overpotential):
            w.writerow([repr(float(v)) for v in row])


def read_truth_csv(path: PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    rows = _read_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise InputError(f"{path}: line 1: missing header") from None
    if tuple(h.lower() for h in header) != TRUTH_HEADER:
        raise InputError(f"{path}: line {lineno}: expected header '{','.join(TRUTH_HEADER)}'")
    data = []
    for lineno, row in rows:
        try:
            data.append([float(c) for c in row])
        except ValueError:
            raise InputError(f"{path}: line {lineno}: non-numeric field") from None
    arr = np.array(data, dtype=float).reshape(-1, 3)
    return {"t_s": arr[:, 0], "soc_true": arr[:, 1], "overpotential_v": arr[:, 2]}


def load_emf_csv(path: PathLike) -> EmfCurve:
    """Read an EMF table with header ``soc,voltage_v``; rejects non-monotonic data."""
    path = Path(path)
    rows = _read_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise InputError(f"{path}: line 1: missing header") from None
    if tuple(h.lower() for h in header) != EMF_HEADER:
        raise InputError(f"{path}: line {lineno}: expected header '{','.join(EMF_HEADER)}'")
    pts = []
    for lineno, row in rows:
        if len(row) != 2:
            raise InputError(f"{path}: line {lineno}: expected 2 fields, got {len(row)}")
        try:
            pts.append((float(row[0]), float(row[1])))
        except ValueError:
            raise InputError(f"{path}: line {lineno}: non-numeric field in {row}") from None
    try:
        return EmfCurve.from_points(pts)
    except EmfCurveError as exc:
        raise InputError(f"{path}: {exc}") from exc


def write_emf_csv(path: PathLike, curve: EmfCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EMF_HEADER)
        for s, v in curve.points:
            w.writerow([repr(s), repr(v)])


def write_json(path: PathLike, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: PathLike):
    path = Path(path)
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"{path}: cannot open: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
