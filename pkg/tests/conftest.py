import pytest

from cellsoh import EmfCurve, PipelineConfig, TruthCellConfig, generate_cycle, pipeline_run
from cellsoh.simulator import CycleSpec, Rest, default_emf

ACCEPTANCE_RESULTS = []


@pytest.fixture
def linear_curve():
    # single 1.2 V/unit line; collinear midpoint satisfies the 3-point minimum
    return EmfCurve.from_points([(0.0, 3.0), (0.5, 3.6), (1.0, 4.2)])


@pytest.fixture
def three_point_curve():
    return EmfCurve.from_points([(0.0, 3.0), (0.5, 3.5), (1.0, 4.2)])


@pytest.fixture(scope="session")
def emf():
    return default_emf()


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the numba kernels once so timed scenarios measure steady-state cost."""
    cell = TruthCellConfig(voltage_noise_std=0.0)
    sim = generate_cycle(CycleSpec((Rest(5),)), cell)
    pipeline_run(sim.telemetry, PipelineConfig(emf=cell.emf, nominal_capacity=cell.ecm.capacity))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {num:>2}. {name}: {detail}")
