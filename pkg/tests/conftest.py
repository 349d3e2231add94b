import numpy as np
import pytest

from multires.data import InstanceSet, MultiResDataset, ResolutionLayer, UNLABELED


def micro_dataset(seed=0, fine_dim=3, coarse_dim=2):
    """Two unlabeled coarse cells over six unlabeled fine cells, two labels per resolution."""
    rng = np.random.default_rng(seed)
    fine_unl = InstanceSet(
        np.arange(6),
        [[0.5, 0.5], [1.5, 0.5], [2.5, 0.5], [3.5, 0.5], [4.5, 0.5], [5.5, 0.5]],
        rng.normal(size=(6, fine_dim)),
        np.full(6, UNLABELED),
    )
    fine_lab = InstanceSet([10, 11], [[50.0, 0.0], [51.0, 0.0]], rng.normal(size=(2, fine_dim)), [0, 1])
    coarse_unl = InstanceSet([0, 1], [[1.5, 0.5], [4.5, 0.5]], rng.normal(size=(2, coarse_dim)), [UNLABELED] * 2)
    coarse_lab = InstanceSet([10, 11], [[50.0, 0.0], [53.0, 0.0]], rng.normal(size=(2, coarse_dim)), [1, 0])
    fine = ResolutionLayer(0, fine_dim, fine_lab, fine_unl)
    coarse = ResolutionLayer(1, coarse_dim, coarse_lab, coarse_unl)
    return MultiResDataset(fine, (coarse,), 2)


@pytest.fixture
def micro():
    return micro_dataset()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
