import numpy as np
import pytest

from cellsoh.model import ModelState, emf_eval, model_output, model_step
from cellsoh.simulator import (CcCharge, CvHold, CycleSpec, DrivePulse, InfeasiblePhaseError, Rest,
                               TruthCellConfig, aging_variant, default_cycle_spec, default_emf,
                               drive_charge_cycle, generate_cycle)


def quiet(**kw):
    return TruthCellConfig(voltage_noise_std=0.0, **kw)


def test_default_emf_shape():
    emf = default_emf()
    assert emf.soc.size == 21
    assert emf.v_min == 3.0 and emf.v_max == 4.2
    # flattest stretch of the curve sits around 80 % SoC
    slopes = emf.slopes
    flat = int(np.argmin(slopes))
    assert 0.7 <= emf.soc[flat] <= 0.85


def test_rest_only_is_constant_emf():
    cell = TruthCellConfig(s_init=0.42, voltage_noise_std=1e-3, seed=5)
    sim = generate_cycle(CycleSpec((Rest(600),)), cell)
    v0 = emf_eval(cell.emf, 0.42)
    assert np.all(sim.voltage_true == v0)
    assert np.abs(sim.telemetry.y - v0).max() < 6e-3
    assert sim.telemetry.y.std() == pytest.approx(1e-3, rel=0.15)


def test_cc_charge_soc_slope_is_exact():
    cell = quiet(s_init=0.3)
    u = 0.5 * cell.ecm.capacity_ah
    sim = generate_cycle(CycleSpec((CcCharge(u, 4.2),)), cell)
    assert len(sim) > 100
    np.testing.assert_allclose(np.diff(sim.soc), u / cell.ecm.capacity, rtol=1e-9)
    assert sim.voltage_true[-1] < 4.2


def test_cv_current_decreases_and_holds_voltage():
    cell = quiet(s_init=0.3)
    i1c = cell.ecm.capacity_ah
    sim = generate_cycle(CycleSpec((CcCharge(i1c, 4.2), CvHold(4.2, 0.05 * i1c))), cell)
    cv = sim.phase_index == 1
    assert cv.sum() > 100
    assert np.all(np.diff(sim.current_true[cv]) < 0)
    np.testing.assert_allclose(sim.voltage_true[cv], 4.2, atol=1e-12)
    assert sim.current_true[cv][-1] >= 0.05 * i1c
    assert sim.soc.max() <= 1.0


def test_self_consistency_with_core_model():
    cell = quiet(s_init=0.9, seed=3)
    sim = generate_cycle(drive_charge_cycle(repeat_count=1), cell)
    th = sim.theta
    state = ModelState(cell.s_init, cell.o_init)
    worst = 0.0
    for u, y in zip(sim.current_true, sim.voltage_true):
        state = model_step(state, th, u)
        worst = max(worst, abs(model_output(state, th, cell.emf, u) - y))
    assert worst < 1e-12


def test_seeded_generation_is_reproducible():
    a = generate_cycle(drive_charge_cycle(), TruthCellConfig(seed=11))
    b = generate_cycle(drive_charge_cycle(), TruthCellConfig(seed=11))
    c = generate_cycle(drive_charge_cycle(), TruthCellConfig(seed=12))
    assert np.array_equal(a.telemetry.y, b.telemetry.y)
    assert np.array_equal(a.telemetry.u, b.telemetry.u)
    assert not np.array_equal(a.telemetry.u, c.telemetry.u)


def test_pulse_blocks_are_piecewise_constant():
    sim = generate_cycle(CycleSpec((DrivePulse(95, -3.0, 1.0),)), quiet(s_init=0.8))
    u = sim.current_true
    assert len(u) == 95
    for start in range(0, 95, 10):
        assert np.all(u[start:start + 10] == u[start])


def test_infeasible_specs_abort():
    with pytest.raises(InfeasiblePhaseError):
        generate_cycle(CycleSpec((CcCharge(2.0, 3.5),)), quiet(s_init=0.9))
    with pytest.raises(InfeasiblePhaseError):
        generate_cycle(CycleSpec((DrivePulse(3600, -10.0, 0.0),)), quiet(s_init=0.2))
    with pytest.raises(InfeasiblePhaseError):
        generate_cycle(CycleSpec((CvHold(3.2, 0.1),)), quiet(s_init=0.9))


def test_soc_stays_in_range_for_default_spec():
    sim = generate_cycle(default_cycle_spec(2), TruthCellConfig(s_init=0.95))
    assert sim.soc.min() >= 0.0 and sim.soc.max() <= 1.0


def test_aging_variant():
    cell = TruthCellConfig()
    assert aging_variant(cell, 1.0, 1.0) == cell
    eol = aging_variant(cell, 4.33 / 4.72, 18.5 / 17.6)
    assert eol.ecm.capacity / cell.ecm.capacity == pytest.approx(0.917, abs=5e-4)
    assert eol.ecm.r0 * 1e3 == pytest.approx(18.5, rel=1e-12)
    assert eol.ecm.r1 == pytest.approx(cell.ecm.r1 * 18.5 / 17.6, rel=1e-12)
    assert eol.ecm.c1 == cell.ecm.c1
    with pytest.raises(ValueError):
        aging_variant(cell, 0.0, 1.0)


def test_spec_roundtrip():
    spec = default_cycle_spec(3)
    assert CycleSpec.from_dict(spec.to_dict()) == spec
    cell = TruthCellConfig(seed=4)
    assert TruthCellConfig.from_dict(cell.to_dict()) == cell


def test_phase_validation():
    with pytest.raises(ValueError):
        DrivePulse(100, 1.0, 0.5)
    with pytest.raises(ValueError):
        CcCharge(-1.0, 4.2)
    with pytest.raises(ValueError):
        Rest(0)
    with pytest.raises(ValueError):
        CycleSpec((), 1)


def test_ten_cycle_default_spec_yields_ten_charge_windows():
    from cellsoh.pipeline import PipelineConfig, pipeline_run

    cell = TruthCellConfig(s_init=0.95, seed=0)
    sim = generate_cycle(default_cycle_spec(10), cell)
    hours = sim.t[-1] / 3600
    assert 15 <= hours <= 25  # about 2 h per cycle
    res = pipeline_run(sim.telemetry, PipelineConfig(cell.emf, 4.4 * 3600))
    assert res.summary.segments_accepted >= 10
