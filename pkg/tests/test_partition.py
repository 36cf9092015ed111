import numpy as np
import pytest

from dinfty.core import Box, Density, random_grid_density
from dinfty.partition import PartitionError, dyadic_lebesgue, dyadic_nu, rectangle_partition_n


def test_lebesgue_tree_is_midpoint_bisection():
    t = dyadic_lebesgue(Box((0, 0), (2, 1)), 3)
    assert len(t.level_nodes(3)) == 8
    vols = np.prod(t.hi - t.lo, axis=1)
    assert np.allclose(vols[t.level_nodes(3)], 0.25)
    assert t.aspect_ratios().max() <= 2.0
    assert t.root.children[0].box == Box((0, 0), (1, 1))


def test_nu_tree_children_split_mass_in_half(rng):
    d = random_grid_density(rng, 3.0, (6, 4))
    t = dyadic_nu(d, Box.unit(2), 8)
    inner = np.flatnonzero(t.left >= 0)
    assert np.allclose(t.nu_mass[t.left[inner]], 0.5 * t.nu_mass[inner], rtol=1e-12, atol=0)
    assert np.allclose(t.nu_mass[t.level_nodes(8)], 2.0**-8, rtol=1e-11)


def test_nu_tree_children_tile_the_parent(rng):
    d = random_grid_density(rng, 2.0, (3, 3, 3), Box.unit(3))
    t = dyadic_nu(d, Box.unit(3), 6)
    inner = np.flatnonzero(t.left >= 0)
    vol = np.prod(t.hi - t.lo, axis=1)
    assert np.allclose(vol[t.left[inner]] + vol[t.right[inner]], vol[inner])


def test_locate_sends_points_to_containing_leaf(rng):
    d = random_grid_density(rng, 2.0, (4, 4))
    t = dyadic_nu(d, Box.unit(2), 7)
    pts = rng.random((2000, 2))
    leaf = t.locate(pts)
    assert (t.left[leaf] < 0).all()
    assert np.all((pts >= t.lo[leaf]) & (pts <= t.hi[leaf]))
    mid = t.locate(pts, depth=3)
    assert (t.level[mid] == 3).all()


def test_depth_out_of_range():
    with pytest.raises(PartitionError):
        dyadic_lebesgue(Box.unit(2), -1)


def test_density_without_mass_in_box():
    d = Density.from_grid(Box.unit(2), np.ones((2, 2)), 1.0)
    with pytest.raises(PartitionError):
        dyadic_nu(d, Box((3, 3), (4, 4)), 2)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 17, 100, 257])
def test_rectangle_partition_has_equal_masses(rng, n):
    d = random_grid_density(rng, 2.0, (5, 5))
    p = rectangle_partition_n(d, n, Box.unit(2))
    assert p.n == n
    f = d.require_field()
    assert np.allclose(f.mass(p.lo, p.hi), 1.0 / n, rtol=1e-10)
    assert np.isclose(np.prod(p.hi - p.lo, axis=1).sum(), 1.0)


def test_rectangle_partition_of_three_on_unit_square():
    p = rectangle_partition_n(Density.from_grid(Box.unit(2), np.ones((1, 1)), 1.0), 3, Box.unit(2))
    assert np.allclose(np.sort(p.aspect_ratios()), [4 / 3, 4 / 3, 3.0])


def test_rectangle_partition_diameter_constant_stays_bounded(rng):
    d = random_grid_density(rng, 2.0, (4, 4))
    consts = [rectangle_partition_n(d, n, Box.unit(2)).measured_constant() for n in (64, 256, 1024, 4096)]
    assert max(consts) < 3 * min(consts)


def test_two_valued_split_position():
    d = Density.from_grid(Box.unit(2), np.array([[1.5], [0.5]]), 2.0)
    t = dyadic_nu(d, Box.unit(2), 1)
    assert t.axis[0] == 0
    assert t.pos[0] == pytest.approx(1 / 3)


def test_uniform_nu_tree_equals_lebesgue_tree():
    box = Box((0, 0, 0), (2, 1, 1.5))
    a = dyadic_nu(Density.from_grid(box, np.ones((1, 1, 1)), 3.0), box, 6)
    b = dyadic_lebesgue(box, 6)
    assert np.allclose(a.lo, b.lo) and np.allclose(a.hi, b.hi)
