from collections import defaultdict

import numpy as np
import pytest

from dinfty.core import Box, BoxUnionDomain, Density, DomainError, WeightedBoxes, pushforward_check, sample
from dinfty.domains import (
    GateMap,
    build_gate,
    build_wp,
    gate_homeomorphism,
    push_field_through_gate,
    rebalance_and_recurse,
)
from oracles import boxes_touch, components


def union_density(domain, rng, lam, spread, cells=6):
    bb = domain.bounding_box()
    v = 1 + spread * (rng.random((cells,) * domain.dim) - 0.5)
    return Density.from_grid(domain, v, lam, grid_box=bb)


def union_probes(domain, per_axis):
    out = []
    for b in domain.boxes:
        e = [np.linspace(a, c, per_axis + 1) for a, c in zip(b.lo, b.hi)]
        for idx in np.ndindex(*(per_axis,) * b.dim):
            out.append(Box(tuple(e[j][i] for j, i in enumerate(idx)), tuple(e[j][i + 1] for j, i in enumerate(idx))))
    return out


@pytest.mark.parametrize("name", ["l_shape", "ring"])
def test_removal_order_keeps_union_connected(request, name):
    dom = request.getfixturevalue(name)
    dec = build_wp(dom)
    boxes = dec.domain.boxes
    assert np.isclose(sum(b.volume for b in boxes), sum(b.volume for b in dom.boxes))
    assert len(dec.steps) == len(boxes) - 1
    assert all(dec.connectivity_checks)
    alive = set(range(len(boxes)))
    for s in dec.steps:
        assert s.neighbor in alive and s.box in alive
        assert boxes_touch(boxes[s.box], boxes[s.neighbor])
        alive.discard(s.box)
        comps = components(alive, lambda a, b: boxes_touch(boxes[a], boxes[b]))
        assert len(comps) == 1


def test_refinement_makes_every_facet_a_full_face():
    # the small box sits against part of the big one
    dom = BoxUnionDomain([Box((0, 0), (1, 3)), Box((1, 1), (2, 2))])
    dec = build_wp(dom)
    for s in dec.steps:
        b = dec.domain.boxes[s.box]
        tan = [j for j in range(2) if j != s.facet.axis]
        for j in tan:
            assert s.facet.lo[j] <= b.lo[j] + 1e-12 and s.facet.hi[j] >= b.hi[j] - 1e-12


def test_single_box_has_no_steps():
    dec = build_wp(BoxUnionDomain.unit(3))
    assert dec.steps == []


def test_gate_slabs_sit_on_the_right_sides(l_shape):
    dec = build_wp(l_shape)
    s = dec.steps[0]
    a_j = dec.domain.boxes[s.box]
    a_nb = dec.domain.boxes[s.neighbor]
    g = build_gate(a_j, a_nb, s.facet)
    assert a_nb.intersect(g.c1).volume == pytest.approx(g.c1.volume)
    assert a_j.intersect(g.c_minus1).volume == pytest.approx(g.c_minus1.volume)
    assert np.isclose(g.c_minus_half.volume, 0.5 * g.c_minus1.volume)


def test_gate_map_lipschitz_constants(l_shape, rng):
    dec = build_wp(l_shape)
    s = dec.steps[0]
    g = build_gate(dec.domain.boxes[s.box], dec.domain.boxes[s.neighbor], s.facet)
    fwd, inv, lips = gate_homeomorphism(g)
    # psi acts on the hull of A_j and C1, the region it is used on
    a_j = dec.domain.boxes[s.box]
    lo = np.minimum(a_j.lo_arr, g.c1.lo_arr)
    hi = np.maximum(a_j.hi_arr, g.c1.hi_arr)
    x = lo + rng.random((4000, 2)) * (hi - lo)
    y = lo + rng.random((4000, 2)) * (hi - lo)
    fx, fy = fwd.evaluate(x), fwd.evaluate(y)
    ratio_f = np.linalg.norm(fx - fy, axis=1) / np.linalg.norm(x - y, axis=1)
    ratio_i = np.linalg.norm(inv.evaluate(fx) - inv.evaluate(fy), axis=1) / np.linalg.norm(fx - fy, axis=1)
    assert ratio_f.max() <= lips["lip"] + 1e-9
    assert ratio_i.max() <= lips["lip_inverse"] + 1e-9
    assert np.allclose(inv.evaluate(fx), x)
    moved = np.linalg.norm(fx - x, axis=1)
    assert moved.max() <= g.r + 1e-12
    # points away from the gate column stay put
    far = np.abs(((x[:, g.axis] - g.position) * g.normal)) > g.r
    assert np.array_equal(fx[far], x[far])


def test_push_field_through_gate_matches_box_pushforward(l_shape, rng):
    dens = union_density(l_shape, rng, 4.0, 0.3)
    dec = build_wp(l_shape)
    s = dec.steps[0]
    box = dec.domain.boxes[s.box]
    g = build_gate(box, dec.domain.boxes[s.neighbor], s.facet)
    f = dens.require_field()
    pushed = push_field_through_gate(f, g, box)
    pm = GateMap(g).push_boxes(WeightedBoxes.from_field(f))
    for _ in range(30):
        lo = box.lo_arr + rng.random(2) * (box.hi_arr - box.lo_arr) * 0.6
        hi = np.minimum(lo + 0.1 + rng.random(2) * 0.4, box.hi_arr)
        direct = pm.boxes.dens @ np.prod(np.clip(np.minimum(pm.boxes.hi, hi) - np.maximum(pm.boxes.lo, lo), 0, None), axis=1)
        assert abs(pushed.mass(lo[None], hi[None])[0] - direct) < 1e-12


@pytest.mark.parametrize("name,lam", [("l_shape", 4.0), ("ring", 16.0)])
@pytest.mark.parametrize("eps", [0.01, 0.1])
def test_union_density_to_density_is_exact(request, rng, name, lam, eps):
    dom = request.getfixturevalue(name)
    base = 1 + 0.3 * (rng.random((6, 6)) - 0.5)
    bump = rng.uniform(-1, 1, (6, 6))
    r1 = Density.from_grid(dom, base + eps * bump, lam, grid_box=dom.bounding_box())
    r2 = Density.from_grid(dom, base, lam, grid_box=dom.bounding_box())
    tr = rebalance_and_recurse(r1, r2)
    led = pushforward_check(tr, r1, r2, union_probes(dom, 3))
    assert led.method == "exact"
    assert led.max_abs_error() < 1e-12
    assert tr.certified_bound <= dom.diameter() + 1e-12
    x = sample(r1, 3000, 1).points
    assert np.linalg.norm(tr.evaluate(x) - x, axis=1).max() <= tr.certified_bound + 1e-12


@pytest.mark.parametrize("name,lam", [("l_shape", 4.0), ("ring", 16.0)])
def test_union_empirical_sends_mass_one_over_n_to_each_point(request, rng, name, lam):
    dom = request.getfixturevalue(name)
    dens = union_density(dom, rng, lam, 0.3)
    emp = sample(dens, 1200, 9)
    tr = rebalance_and_recurse(dens, emp)
    pm = tr.pushforward(WeightedBoxes.from_field(dens.require_field()))
    assert pm.boxes is None or pm.boxes.total() < 1e-12
    acc = defaultdict(float)
    for p, m in zip(map(tuple, pm.atoms.points), pm.atoms.masses):
        acc[p] += m
    assert set(acc) == set(map(tuple, emp.points))
    assert max(abs(v - 1 / 1200) for v in acc.values()) < 1e-12
    x = sample(dens, 3000, 2).points
    assert np.linalg.norm(tr.evaluate(x) - x, axis=1).max() <= tr.certified_bound + 1e-12


def test_empty_box_falls_back_to_cumulative_assignment(l_shape):
    dens = Density.from_grid(l_shape, np.ones((2, 2)), 4.0, grid_box=l_shape.bounding_box())
    from dinfty.core import EmpiricalMeasure

    pts = np.array([[0.2, 0.3], [0.7, 0.4], [1.5, 0.5]])
    tr = rebalance_and_recurse(dens, EmpiricalMeasure(pts, 0, "manual"))
    assert tr.kind == "cumulative-assignment"
    assert tr.certified_bound <= l_shape.diameter()
    ev = tr.evaluate(np.array([[0.5, 1.5]]))
    assert any(np.allclose(ev[0], p) for p in pts)


def test_disconnected_domain_rejected():
    with pytest.raises(DomainError):
        build_wp(BoxUnionDomain([Box((0, 0), (1, 1)), Box((1, 1), (2, 2))]))


def test_gate_radius_rule():
    a = Box((0, 0, 0), (1, 1, 1))
    b = Box((1, 0, 0), (2, 1, 1))
    from dinfty.core import shared_facet

    g = build_gate(a, b, shared_facet(a, b))
    assert g.r == 0.5
    assert g.normal == 1 and g.axis == 0
    thin_a = Box((0, 0), (1, 0.01))
    thin_b = Box((0, 0.01), (0.01, 1))
    g = build_gate(thin_b, thin_a, shared_facet(thin_a, thin_b))
    assert g.r == pytest.approx(0.005)


def test_gate_anchor_points_and_round_trip(ring):
    from scipy.stats import qmc

    dec = build_wp(ring)
    for s in dec.steps:
        a_j = dec.domain.boxes[s.box]
        g = build_gate(a_j, dec.domain.boxes[s.neighbor], s.facet)
        fwd, inv, _ = gate_homeomorphism(g)
        # y_1 goes to y, y to y_{-1/2}, y_{-1} stays
        tan = [j for j in range(2) if j != g.axis]
        cols = np.linspace(s.facet.lo[tan[0]], s.facet.hi[tan[0]], 7)
        for u, want in ((g.r, 0.0), (0.0, -g.r / 2), (-g.r, -g.r)):
            pts = np.zeros((7, 2))
            pts[:, tan[0]] = cols
            pts[:, g.axis] = g.position + g.normal * u
            out = fwd.evaluate(pts)
            assert np.allclose(out[:, g.axis], g.position + g.normal * want, atol=1e-15)
        lo = np.minimum(a_j.lo_arr, g.c1.lo_arr)
        hi = np.maximum(a_j.hi_arr, g.c1.hi_arr)
        x = qmc.scale(qmc.Sobol(2, seed=0).random(2**13), lo, hi)
        assert np.abs(inv.evaluate(fwd.evaluate(x)) - x).max() < 1e-12
