import math
from collections import defaultdict

import numpy as np
import pytest

from dinfty.core import Box, Density, Field, WeightedBoxes, grid_probes, pushforward_check, random_grid_density, sample
from dinfty.multiscale import (
    KnotheRosenblatt,
    TransportError,
    auto_depth,
    cutoff_level,
    density_to_density,
    empirical_coupling_highd,
    uniform_to_density,
)
from conftest import perturbed_pair


def random_probes(rng, d, count):
    lo = rng.random((count, d)) * 0.7
    hi = lo + 0.05 + rng.random((count, d)) * 0.25
    return [Box(tuple(a), tuple(b)) for a, b in zip(lo, np.minimum(hi, 1.0))]


def max_moved(tr, rng, d, n=4000):
    x = rng.random((n, d))
    return float(np.linalg.norm(tr.evaluate(x) - x, axis=1).max())


def test_cutoff_and_auto_depth():
    for n in (1000, 2**14, 10**6):
        k = cutoff_level(n, 3.0)
        assert 2**k <= n / (30 * math.log(n)) < 2 ** (k + 1)
    assert auto_depth(0.25, 2) == 4
    assert auto_depth(0.3, 3) == math.ceil(-3 * math.log2(0.3))


def test_constant_density_gives_identity():
    d = Density.from_grid(Box.unit(2), np.ones((3, 3)), 1.0)
    tr = uniform_to_density(d)
    assert tr.certified_bound == 0.0
    x = np.random.default_rng(0).random((10, 2))
    assert np.array_equal(tr.evaluate(x), x)


@pytest.mark.parametrize("d", [2, 3])
def test_kr_is_exact_and_bound_is_tight(rng, d):
    shape = (3,) * d
    a = random_grid_density(rng, 3.0, shape, Box.unit(d)).require_field()
    b = random_grid_density(rng, 3.0, shape, Box.unit(d)).require_field()
    kr = KnotheRosenblatt(a, b, Box.unit(d))
    pm = kr.pushforward(WeightedBoxes.from_field(a))
    for p in random_probes(rng, d, 30):
        lo, hi = p.lo_arr, p.hi_arr
        got = pm.boxes.dens @ np.prod(np.clip(np.minimum(pm.boxes.hi, hi) - np.maximum(pm.boxes.lo, lo), 0, None), axis=1)
        assert abs(got - b.mass(lo[None], hi[None])[0]) < 1e-12
    moved = max_moved(kr, rng, d, 20000)
    assert moved <= kr.bound + 1e-12
    assert moved >= 0.8 * kr.bound
    back = kr.inverse()
    x = rng.random((500, d))
    assert np.allclose(back.evaluate(kr.evaluate(x)), x, atol=1e-9)


@pytest.mark.parametrize("lam,shape", [(1.5, (4, 4)), (1.2, (8, 8)), (1.1, (3, 3, 3))])
def test_uniform_to_density_pushforward_and_bound(rng, lam, shape):
    d = len(shape)
    dens = random_grid_density(rng, lam, shape, Box.unit(d))
    tr = uniform_to_density(dens)
    uni = Density.from_grid(Box.unit(d), np.ones((1,) * d), 1.0)
    led = pushforward_check(tr, uni, dens, random_probes(rng, d, 40))
    assert led.method == "exact"
    assert led.max_abs_error() < 1e-12
    assert max_moved(tr, rng, d) <= tr.certified_bound + 1e-12


def test_density_to_density_is_exact(rng):
    r1, r2 = perturbed_pair(rng, (6, 6), 1e-2)
    tr = density_to_density(r1, r2)
    assert tr.kind == "density-to-density"
    led = pushforward_check(tr, r1, r2, grid_probes(Box.unit(2), 4) + random_probes(rng, 2, 20))
    assert led.max_abs_error() < 1e-12
    assert max_moved(tr, rng, 2) <= tr.certified_bound + 1e-12


def test_density_to_density_falls_back_for_large_gaps(rng):
    r1 = random_grid_density(rng, 4.0, (4, 4))
    r2 = random_grid_density(rng, 4.0, (4, 4))
    tr = density_to_density(r1, r2)
    assert tr.kind.endswith("trivial")
    assert np.isclose(tr.certified_bound, math.sqrt(2))
    led = pushforward_check(tr, r1, r2, grid_probes(Box.unit(2), 4))
    assert led.max_abs_error() < 1e-12


def test_density_to_density_bound_is_linear_in_gap(rng):
    vals = []
    for eps in (1e-2, 1e-3):
        r1, r2 = perturbed_pair(np.random.default_rng(4), (4, 4), eps)
        vals.append(density_to_density(r1, r2).certified_bound / eps)
    assert max(vals) / min(vals) < 5


def test_unequal_masses_rejected():
    a = Field.constant(Box.unit(2), 1.0)
    b = Field.constant(Box.unit(2), 2.0)
    from dinfty.multiscale import density_to_density_field

    with pytest.raises(TransportError):
        density_to_density_field(a, b, Box.unit(2))


@pytest.mark.parametrize("d,lam,n", [(2, 1.0, 3000), (3, 1.0, 4000), (2, 2.0, 3000), (3, 2.0, 2500)])
def test_highd_coupling_hits_each_sample_with_mass_one_over_n(rng, d, lam, n):
    dens = random_grid_density(rng, lam, (2,) * d, Box.unit(d)) if lam > 1 else Density.from_grid(Box.unit(d), np.ones((1,) * d), 1.0)
    emp = sample(dens, n, 11)
    tr = empirical_coupling_highd(dens, emp)
    pm = tr.pushforward(WeightedBoxes.from_field(dens.require_field()))
    assert pm.boxes is None or pm.boxes.total() < 1e-12
    # one atom of mass 1/n per sample point, possibly split into pieces
    acc = defaultdict(float)
    for p, m in zip(map(tuple, pm.atoms.points), pm.atoms.masses):
        acc[p] += m
    assert len(acc) == n
    assert max(abs(v - 1.0 / n) for v in acc.values()) < 1e-12
    assert set(acc) == set(map(tuple, emp.points))
    assert max_moved(tr, rng, d) <= tr.certified_bound + 1e-12
    assert tr.info["k_n"] == cutoff_level(n, 3.0)


def test_highd_levels_have_equal_mass_nodes(rng):
    dens = random_grid_density(rng, 2.0, (3, 3))
    emp = sample(dens, 5000, 2)
    tr = empirical_coupling_highd(dens, emp)
    k = tr.info["k_n"]
    nodes = tr.tree.level_nodes(k)
    assert np.allclose(tr.tree.nu_mass[nodes], 2.0**-k, rtol=1e-10)
    assert tr.counts[nodes].sum() == 5000


def test_two_valued_density_level_zero_map():
    d = Density.from_grid(Box.unit(2), np.array([[1.5], [0.5]]), 2.0)
    tr = uniform_to_density(d)
    assert tr.certified_bound == pytest.approx(0.25)
    x = np.array([[0.75, 0.3]])
    assert np.allclose(tr.evaluate(x), [[0.5, 0.3]])


def test_far_apart_densities_get_the_diameter():
    a = Density.from_grid(Box.unit(2), np.array([[1.9], [0.1]]), 20.0)
    b = Density.from_grid(Box.unit(2), np.array([[1.0], [1.0]]), 20.0)
    tr = density_to_density(a, b)
    assert tr.certified_bound == pytest.approx(math.sqrt(2))


@pytest.mark.parametrize("d", [2, 3])
def test_bounds_hold_on_quasi_random_probes(rng, d):
    from scipy.stats import qmc

    x = qmc.Sobol(d, seed=1).random(2**13)
    r1, r2 = perturbed_pair(rng, (4,) * d, 0.05)
    dens = random_grid_density(rng, 2.0, (3,) * d, Box.unit(d))
    for tr in (
        uniform_to_density(dens),
        density_to_density(r1, r2),
        empirical_coupling_highd(dens, sample(dens, 3000, 4)),
    ):
        assert np.linalg.norm(tr.evaluate(x) - x, axis=1).max() <= tr.certified_bound + 1e-9
        assert tr.certified_bound <= math.sqrt(d) + 1e-12


def test_single_sample_goes_everywhere():
    dens = Density.from_grid(Box.unit(3), np.ones((1, 1, 1)), 1.0)
    tr = empirical_coupling_highd(dens, np.array([[0.2, 0.3, 0.9]]))
    assert tr.certified_bound <= math.sqrt(3)
    assert np.allclose(tr.evaluate(np.array([[0.9, 0.9, 0.1]])), [[0.2, 0.3, 0.9]])


def test_summary_json_lists_levels(rng):
    import json

    dens = random_grid_density(rng, 2.0, (3, 3, 3), Box.unit(3))
    tr = empirical_coupling_highd(dens, sample(dens, 4000, 1))
    data = json.loads(tr.to_json())
    assert data["certified_bound"] == tr.certified_bound
    assert len(data["levels"]) >= tr.info["k_n"]
