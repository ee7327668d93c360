import numpy as np
import pytest

from mqproxy import bench, netzoo


@pytest.fixture(scope="session")
def desk():
    return netzoo.desk_setup("cnn-s")


@pytest.fixture(scope="session")
def desk_stats(desk):
    return netzoo.extract_stats(desk.net, desk.dataset, seed=0)


@pytest.fixture(scope="session")
def desk_bench(desk):
    return bench.build_benchmark(desk.net, desk.dataset, 425, seed=0)


@pytest.fixture(scope="session")
def mlp_desk():
    return netzoo.desk_setup("mlp-s")


@pytest.fixture(scope="session")
def mlp_stats(mlp_desk):
    return netzoo.extract_stats(mlp_desk.net, mlp_desk.dataset, seed=0)


def fake_stats(rng, n_layers=4, shapes=None):
    """Random LayerStats with positive-definite-ish tensors of mixed shapes."""
    shapes = shapes or [(8, 1, 3, 3), (8, 8, 3, 3), (16, 8), (4, 16)][:n_layers]
    out = []
    for j, shape in enumerate(shapes):
        w = rng.standard_normal(shape)
        a = np.abs(rng.standard_normal((16, shape[0])))
        out.append(netzoo.LayerStats(
            f"l{j}", "conv" if len(shape) == 4 else "linear", w, rng.standard_normal(shape), a,
            np.abs(rng.standard_normal(shape)), rng.standard_normal(shape) * 10 ** rng.uniform(-3, 3),
            rng.standard_normal(a.shape), int(np.prod(shape[1:])), int(np.prod(shape)), 0, 16))
    return out


ACCEPTANCE_LINES = {}


@pytest.fixture
def report_criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(n, ok, detail):
        ACCEPTANCE_LINES[n] = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
        print(ACCEPTANCE_LINES[n])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
