import numpy as np
import pytest

from dinfty.core import Box, BoxUnionDomain, Density


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def unit_square():
    return BoxUnionDomain.unit(2)


@pytest.fixture
def l_shape():
    return BoxUnionDomain([Box((0, 0), (2, 1)), Box((0, 1), (1, 2))])


@pytest.fixture
def ring():
    return BoxUnionDomain([Box((i, j), (i + 1, j + 1)) for i in range(3) for j in range(3) if (i, j) != (1, 1)])


def probe_arrays(boxes):
    lo = np.array([b.lo for b in boxes], dtype=float)
    hi = np.array([b.hi for b in boxes], dtype=float)
    return lo, hi


def perturbed_pair(rng, shape, eps, lam=2.0, spread=0.5):
    """Two grid densities on the unit cube with sup-distance close to eps."""
    box = Box.unit(len(shape))
    v2 = 1 + spread * (rng.random(shape) - 0.5)
    v2 /= v2.mean()
    pert = rng.uniform(-1, 1, shape)
    pert -= pert.mean()
    pert *= eps / np.abs(pert).max()
    r1 = Density.from_grid(box, v2 + pert, lam)
    r2 = Density.from_grid(box, v2, lam)
    return r1, r2


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
