import numpy as np
import pytest

from hcg.graph import SyntheticSpec, build_csr, from_coo, generate_synthetic

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def random_csr(rng, n_rows, n_cols, density=0.3):
    mask = rng.random((n_rows, n_cols)) < density
    r, c = np.nonzero(mask)
    return from_coo(n_rows, n_cols, r, c, rng.uniform(-1.0, 1.0, r.size))


def random_graph(seed, n_cell=None, n_net=None, d_cell=None, d_net=None):
    """Random small heterograph with arbitrary sizes drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    n_cell = n_cell or int(rng.integers(4, 65))
    n_net = n_net or int(rng.integers(1, 65))
    d_cell = d_cell or int(rng.integers(1, 17))
    d_net = d_net or int(rng.integers(1, 17))
    near_mean = float(rng.uniform(1.0, min(8.0, n_cell - 1.5)))
    pin_mean = float(rng.uniform(1.0, min(4.0, n_cell - 1.5)))
    return generate_synthetic(SyntheticSpec(n_cell, n_net, d_cell, d_net, near_mean, pin_mean,
                                            float(rng.uniform(0.2, 1.0)), seed))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_graph():
    return generate_synthetic(SyntheticSpec(n_cell=60, n_net=35, d_cell=8, d_net=8,
                                            near_mean_degree=6.0, pin_mean_degree=3.0, seed=3))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


__all__ = ["random_csr", "random_graph", "build_csr"]
