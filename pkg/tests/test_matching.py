import numpy as np
import pytest

from dinfty.core import Box, BoxUnionDomain, Density, random_grid_density, sample
from dinfty.matching import (
    BipartiteInstance,
    bottleneck_match,
    grid_discrepancy_diagnostic,
    hall_matching_2d,
    l2_level,
    matching_at_threshold,
)
from dinfty.partition import rectangle_partition_n
from oracles import box_cost_matrix, brute_bottleneck, point_cost_matrix


@pytest.mark.parametrize("d", [2, 3])
def test_points_against_brute_force(rng, d):
    for _ in range(100):
        n = int(rng.integers(1, 8))
        a = rng.random((n, d))
        b = rng.random((n, d))
        res = bottleneck_match(BipartiteInstance.points(a, b))
        assert res.bottleneck_radius == brute_bottleneck(point_cost_matrix(a, b))
        assert sorted(res.perm.tolist()) == list(range(n))


def test_boxes_against_brute_force(rng):
    for _ in range(60):
        n = int(rng.integers(1, 7))
        lo = rng.random((n, 2))
        hi = lo + rng.random((n, 2)) * 0.2
        x = rng.random((n, 2))
        res = bottleneck_match(BipartiteInstance(lo, hi, x))
        assert res.bottleneck_radius == brute_bottleneck(box_cost_matrix(lo, hi, x))


def test_ties_and_duplicates():
    a = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 1.0], [1.0, 1.0], [0.0, 1.0]])
    res = bottleneck_match(BipartiteInstance.points(a, b))
    assert res.bottleneck_radius == brute_bottleneck(point_cost_matrix(a, b))


def test_large_instance_uses_sparse_edges(rng):
    n = 3000
    a = rng.random((n, 2))
    b = rng.random((n, 2))
    res = bottleneck_match(BipartiteInstance.points(a, b))
    c = point_cost_matrix(a, b)
    assert np.isclose(c[np.arange(n), res.perm].max(), res.bottleneck_radius)
    # no perfect matching just below the radius
    r = np.nextafter(res.bottleneck_radius, 0)
    ok, _, viol = matching_at_threshold(BipartiteInstance.points(a, b), r)
    assert not ok
    assert len(viol["N_I"]) < len(viol["I"])
    for i in viol["I"]:
        assert set(np.flatnonzero(c[i] <= r)) <= set(viol["N_I"].tolist())


def test_certificate_records_infeasible_next_radius(rng):
    a = rng.random((6, 2))
    b = rng.random((6, 2))
    res = bottleneck_match(BipartiteInstance.points(a, b))
    if "next_smaller" in res.certificate:
        assert res.certificate["feasible_at_next_smaller"] is False
        assert res.certificate["hall_neighbourhood_size"] < res.certificate["hall_set_size"]


def test_hall_transport_moves_each_rectangle_to_one_point(rng):
    d = random_grid_density(rng, 2.0, (4, 4))
    emp = sample(d, 300, 5)
    ht = hall_matching_2d(d, emp)
    assert sorted(map(tuple, ht.targets)) == sorted(map(tuple, emp.points))
    part = rectangle_partition_n(d, 300, Box.unit(2))
    assert np.allclose(part.lo, ht.lo)
    # the bound is the farthest corner of each rectangle from its target
    corners = np.stack([ht.lo, ht.hi, np.column_stack([ht.lo[:, 0], ht.hi[:, 1]]), np.column_stack([ht.hi[:, 0], ht.lo[:, 1]])])
    far = np.sqrt(((corners - ht.targets[None]) ** 2).sum(-1)).max()
    assert np.isclose(ht.certified_bound, far)
    x = rng.random((500, 2))
    assert np.linalg.norm(ht(x) - x, axis=1).max() <= ht.certified_bound + 1e-12


def test_l2_level_is_largest_integer():
    for n in (100, 10**4, 10**6, 10**9):
        l = l2_level(n)
        target = 64 * np.log(n) ** 0.75 / np.sqrt(n)
        assert 2.0**-l >= target
        assert 2.0 ** -(l + 1) < target


def test_discrepancy_diagnostic_matches_brute_force(rng):
    dens = Density.uniform(BoxUnionDomain.unit(2))
    emp = sample(dens, 200, 1)
    rep = grid_discrepancy_diagnostic(emp, dens, 2)
    e = np.linspace(0, 1, 5)
    best = 0.0
    for x0 in range(4):
        for x1 in range(x0 + 1, 5):
            for y0 in range(4):
                for y1 in range(y0 + 1, 5):
                    p = emp.points
                    inside = (p[:, 0] >= e[x0]) & (p[:, 0] <= e[x1]) & (p[:, 1] >= e[y0]) & (p[:, 1] <= e[y1])
                    diff = inside.sum() - 200 * (e[x1] - e[x0]) * (e[y1] - e[y0])
                    best = max(best, abs(diff) / (2 * ((e[x1] - e[x0]) + (e[y1] - e[y0]))))
    assert np.isclose(rep.max_ratio * np.sqrt(200) * np.log(200) ** 0.75, best)


def test_discrepancy_mesh_cap(rng):
    d = random_grid_density(rng, 1.0, (1, 1))
    with pytest.raises(ValueError):
        grid_discrepancy_diagnostic(sample(d, 10, 0), d, 9)
