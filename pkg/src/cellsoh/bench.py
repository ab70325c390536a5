"""Throughput harness for the coupled estimator.

    python -m cellsoh.bench [--hours 20] [--repeats 5]
"""

from __future__ import annotations

import argparse
import time

from .pipeline import OnlineEstimator, PipelineConfig, pipeline_run
from .simulator import default_cycle_spec, generate_cycle, TruthCellConfig


def make_corpus(repeat_count: int = 10, seed: int = 0):
    cell = TruthCellConfig(s_init=0.95, seed=seed)
    return cell, generate_cycle(default_cycle_spec(repeat_count), cell).telemetry


def pipeline_throughput(tel, cfg: PipelineConfig, repeats: int = 5) -> float:
    """Best-of-``repeats`` batch pipeline steps per second (after a warm-up run)."""
    pipeline_run(tel, cfg)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        pipeline_run(tel, cfg)
        best = min(best, time.perf_counter() - t0)
    return len(tel) / best


def online_step_time(tel, cfg: PipelineConfig, n: int = 5000) -> float:
    """Mean wall time per sample of the streaming estimator, in seconds."""
    est = OnlineEstimator(cfg)
    samples = list(zip(range(n), tel))
    est.step(samples[0][1])
    t0 = time.perf_counter()
    for _, s in samples[1:]:
        est.step(s)
    return (time.perf_counter() - t0) / max(len(samples) - 1, 1)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="estimator throughput benchmark")
    ap.add_argument("--cycles", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    cell, tel = make_corpus(args.cycles)
    cfg = PipelineConfig(emf=cell.emf, nominal_capacity=4.4 * 3600)
    rate = pipeline_throughput(tel, cfg, args.repeats)
    step = online_step_time(tel, cfg)
    print(f"samples={len(tel)} batch_steps_per_s={rate:.0f} realtime_factor={rate * cfg.jekf.tau:.0f} "
          f"online_step_us={step * 1e6:.1f}")


if __name__ == "__main__":
    main()
