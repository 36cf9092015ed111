import math

import numpy as np
import pytest

from dinfty.bounds import bernstein, chernoff, lower_bound_certificate
from dinfty.core import Box, BoxUnionDomain, Density, random_grid_density, sample
from dinfty.multiscale import empirical_coupling_highd
from oracles import binomial_two_sided_tail


def test_tail_formulas():
    assert chernoff(100, 0.3, 0.1).bound == pytest.approx(2 * math.exp(-2.0))
    b = bernstein(100, 0.3, 0.1)
    assert b.bound == pytest.approx(2 * math.exp(-0.5 / (0.21 + 0.1 / 3)))
    with pytest.raises(ValueError):
        chernoff(0, 0.5, 0.1)
    with pytest.raises(ValueError):
        bernstein(10, 1.5, 0.1)
    with pytest.raises(ValueError):
        bernstein(10, 0.5, 0.0)


@pytest.mark.parametrize("m", [10, 100, 1000, 10000])
def test_tails_dominate_exact_binomial(m):
    for p in (0.01, 0.1, 0.5, 0.9):
        for t in (0.005, 0.02, 0.1, 0.3):
            exact = binomial_two_sided_tail(m, p, t)
            assert exact <= chernoff(m, p, t).bound + 1e-15
            assert exact <= bernstein(m, p, t).bound + 1e-15


def _cell_distance(alo, ahi, blo, bhi):
    gap = np.maximum(np.maximum(alo - bhi, blo - ahi), 0.0)
    return np.sqrt((gap**2).sum(-1))


def check_mass_witness(cert, density, emp):
    """Recompute nu_n(A) and an upper bound on nu(A^r) from the cells."""
    cells = np.array(cert.witness_cells)
    lo, hi = cells[:, 0], cells[:, 1]
    pts = emp.points
    inside = np.zeros(len(pts), dtype=bool)
    for a, b in zip(lo, hi):
        inside |= np.all((pts >= a) & (pts <= b), axis=1)
    assert inside.sum() / emp.n >= cert.nu_n_mass - 1e-12
    m = round(1 / (hi[0, 0] - lo[0, 0]))
    d = density.dim
    e = np.linspace(0, 1, m + 1)
    grid_lo = np.stack(np.meshgrid(*[e[:-1]] * d, indexing="ij"), -1).reshape(-1, d)
    grid_hi = grid_lo + 1.0 / m
    near = np.zeros(len(grid_lo), dtype=bool)
    for a, b in zip(lo, hi):
        near |= _cell_distance(grid_lo, grid_hi, a, b) <= cert.r
    enlarged = density.mass(grid_lo[near], grid_hi[near]).sum()
    assert enlarged <= cert.nu_enlarged_mass + 1e-12
    assert inside.sum() / emp.n > enlarged


@pytest.mark.parametrize("d,n", [(2, 50), (2, 400), (3, 300)])
def test_certificate_is_valid(rng, d, n):
    dens = random_grid_density(rng, 2.0, (3,) * d, Box.unit(d))
    emp = sample(dens, n, 3)
    cert = lower_bound_certificate(dens, emp, mesh_exponent=4)
    assert cert.r > 0
    if cert.kind == "mass":
        check_mass_witness(cert, dens, emp)
    else:
        c = np.array(cert.center)
        assert dens.domain.contains(c[None])[0]
        assert np.linalg.norm(emp.points - c, axis=1).min() == pytest.approx(cert.r)


def test_mass_witness_on_clustered_sample():
    dens = Density.uniform(BoxUnionDomain.unit(2))
    from dinfty.core import EmpiricalMeasure

    g = (np.arange(8) + 0.5) / 8
    spread = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    cluster = np.full((64, 2), 0.01) + np.linspace(0, 0.005, 64)[:, None]
    emp = EmpiricalMeasure(np.vstack([spread, cluster]), 0, "cluster")
    cert = lower_bound_certificate(dens, emp, mesh_exponent=4)
    assert cert.kind == "mass"
    check_mass_witness(cert, dens, emp)
    # half the mass sits in a corner and must be spread over the square
    assert cert.r > 0.4


def test_certificate_below_upper_bound(rng):
    dens = random_grid_density(rng, 2.0, (2, 2, 2), Box.unit(3))
    for seed in range(3):
        emp = sample(dens, 2000, seed)
        cert = lower_bound_certificate(dens, emp)
        assert cert.r <= empirical_coupling_highd(dens, emp).certified_bound


def test_mesh_cap():
    dens = Density.uniform(BoxUnionDomain.unit(2))
    with pytest.raises(ValueError):
        lower_bound_certificate(dens, sample(dens, 10, 0), mesh_exponent=8)


def test_certificate_json(rng):
    dens = Density.uniform(BoxUnionDomain.unit(2))
    import json

    cert = lower_bound_certificate(dens, sample(dens, 100, 0), mesh_exponent=3)
    data = json.loads(cert.to_json())
    assert data["r"] == cert.r and data["kind"] in ("mass", "empty-ball")


def test_tails_match_high_precision_reference():
    import mpmath

    mpmath.mp.dps = 40
    for m, p, t in ((10, 0.5, 0.1), (1000, 0.01, 0.005), (2**20, 2.0**-12, 2.0**-13), (7, 0.0, 0.3)):
        ch = 2 * mpmath.exp(-2 * m * mpmath.mpf(t) ** 2)
        be = 2 * mpmath.exp(-(m * mpmath.mpf(t) ** 2 / 2) / (mpmath.mpf(p) * (1 - mpmath.mpf(p)) + mpmath.mpf(t) / 3))
        assert abs(chernoff(m, p, t).bound - float(ch)) <= 1e-14 * float(ch)
        assert abs(bernstein(m, p, t).bound - float(be)) <= 1e-14 * float(be)


def test_single_corner_sample():
    from dinfty.core import EmpiricalMeasure

    dens = Density.uniform(BoxUnionDomain.unit(2))
    cert = lower_bound_certificate(dens, EmpiricalMeasure(np.array([[0.0, 0.0]]), 0, "corner"), mesh_exponent=4)
    # everything must reach the corner; the far corner is sqrt(2) away
    assert cert.r > 0.5
    assert cert.r <= math.sqrt(2)
