"""Transport on unions of boxes.

A connected union is taken apart one box at a time: a spanning tree of the
facet adjacency graph is built and its leaves are removed in turn, so the
remaining union stays connected. Mass is exchanged between a removed box
and the rest through a thin slab (the gate) straddling their shared facet.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Box,
    BoxUnionDomain,
    Density,
    DomainError,
    EmpiricalMeasure,
    Facet,
    Field,
    PushedMeasure,
    WeightedBoxes,
    intersect_boxes,
    locate_in_boxes,
    shared_facet,
    subtract_box,
)
from .matching import hall_matching_2d
from .multiscale import (
    CellAssignment,
    ComposedTransport,
    Identity,
    KnotheRosenblatt,
    Stage,
    TransportError,
    _merge,
    count_bisection,
    density_to_density_field,
    empirical_coupling_highd,
)


def _key(b: Box):
    return (tuple(b.lo), tuple(b.hi))


@dataclass
class RemovalStep:
    box: int  # A_j, the removed leaf
    neighbor: int  # its tree parent
    facet: Facet


@dataclass
class WPDecomposition:
    domain: BoxUnionDomain
    adjacency: dict[int, list[int]]
    tree_edges: list[tuple[int, int]]
    steps: list[RemovalStep]
    connectivity_checks: list[bool] = field(default_factory=list)
    refined: bool = False

    @property
    def boxes(self) -> list[Box]:
        return list(self.domain.boxes)

    def remaining_after(self, k: int) -> list[int]:
        gone = {s.box for s in self.steps[:k]}
        return [i for i in range(len(self.domain.boxes)) if i not in gone]

    def to_json(self) -> str:
        return json.dumps(
            {
                "boxes": [b.to_json() for b in self.domain.boxes],
                "tree_edges": [list(e) for e in self.tree_edges],
                "removal_order": [s.box for s in self.steps],
                "gates": [build_gate(self.domain.boxes[s.box], self.domain.boxes[s.neighbor], s.facet).to_dict() for s in self.steps],
            }
        )


def _adjacency(boxes: list[Box]) -> dict[int, list[int]]:
    adj: dict[int, list[int]] = {i: [] for i in range(len(boxes))}
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if shared_facet(boxes[i], boxes[j]) is not None:
                adj[i].append(j)
                adj[j].append(i)
    return adj


def _flood_fill(adj: dict[int, list[int]], alive: set[int]) -> bool:
    if not alive:
        return True
    start = min(alive)
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v in alive and v not in seen:
                seen.add(v)
                queue.append(v)
    return seen == alive


def _is_full_face(b: Box, f: Facet) -> bool:
    sides = [j for j in range(b.dim) if j != f.axis]
    return all(f.lo[j] <= b.lo[j] + 1e-12 and f.hi[j] >= b.hi[j] - 1e-12 for j in sides)


def _split_to_face(b: Box, f: Facet) -> list[Box]:
    """Cut b so that one piece has f as a full face."""
    lo = list(b.lo)
    hi = list(b.hi)
    for j in range(b.dim):
        if j != f.axis:
            lo[j] = max(lo[j], f.lo[j])
            hi[j] = min(hi[j], f.hi[j])
    core = Box(tuple(lo), tuple(hi))
    return [core] + subtract_box(b, core)


def build_wp(domain: BoxUnionDomain, refine: bool = True) -> WPDecomposition:
    """Spanning tree by BFS from the lexicographically smallest box and the
    removal order obtained by repeatedly deleting tree leaves.

    With ``refine`` a removed box whose shared facet is not a whole face of
    it is cut into boxes until it is, and the construction restarts.
    """
    boxes = list(domain.boxes)
    refined = False
    while True:
        adj = _adjacency(boxes)
        comps = BoxUnionDomain(boxes, require_connected=False).components()
        if len(comps) > 1:
            raise DomainError(f"domain is disconnected; components {comps}")
        order = sorted(range(len(boxes)), key=lambda i: _key(boxes[i]))
        root = order[0]
        parent = {root: -1}
        depth = {root: 0}
        seen_order = [root]
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in sorted(adj[u], key=lambda i: _key(boxes[i])):
                if v not in parent:
                    parent[v] = u
                    depth[v] = depth[u] + 1
                    seen_order.append(v)
                    queue.append(v)
        tree_edges = [(parent[v], v) for v in seen_order if parent[v] >= 0]
        children = {i: 0 for i in range(len(boxes))}
        for v in seen_order:
            if parent[v] >= 0:
                children[parent[v]] += 1
        alive = set(range(len(boxes)))
        steps: list[RemovalStep] = []
        checks: list[bool] = []
        # deepest leaves first, ties broken by BFS order
        rank = {v: k for k, v in enumerate(seen_order)}
        while len(alive) > 1:
            leaves = [v for v in alive if children[v] == 0 and parent[v] >= 0]
            v = max(leaves, key=lambda i: (depth[i], rank[i]))
            u = parent[v]
            f = shared_facet(boxes[v], boxes[u])
            steps.append(RemovalStep(v, u, f))
            alive.discard(v)
            children[u] -= 1
            checks.append(_flood_fill(adj, alive))
        bad = [s for s in steps if not _is_full_face(boxes[s.box], s.facet)]
        if not bad or not refine:
            break
        s = bad[0]
        pieces = _split_to_face(boxes[s.box], s.facet)
        boxes = boxes[: s.box] + pieces + boxes[s.box + 1 :]
        refined = True
    dom = BoxUnionDomain(boxes) if refined else domain
    if not all(checks):
        raise DomainError("a removal step disconnected the domain")
    return WPDecomposition(dom, adj, tree_edges, steps, checks, refined)


def sub_decomposition(dec: WPDecomposition) -> tuple[WPDecomposition, Box]:
    """Decomposition of D' = D minus the first removed box, and that box."""
    first = dec.steps[0]
    keep = [i for i in range(len(dec.domain.boxes)) if i != first.box]
    remap = {old: new for new, old in enumerate(keep)}
    boxes = [dec.domain.boxes[i] for i in keep]
    steps = [RemovalStep(remap[s.box], remap[s.neighbor], s.facet) for s in dec.steps[1:]]
    adj = {remap[i]: [remap[j] for j in dec.adjacency[i] if j in remap] for i in keep}
    edges = [(remap[a], remap[b]) for a, b in dec.tree_edges if a in remap and b in remap]
    sub = WPDecomposition(BoxUnionDomain(boxes), adj, edges, steps, dec.connectivity_checks[1:], dec.refined)
    return sub, dec.domain.boxes[first.box]


# ---------------------------------------------------------------------------
# gates


@dataclass
class Gate:
    """Slabs over a facet F: C1 on the neighbour side, C_{-1} and C_{-1/2}
    on the removed-box side; ``normal`` points from A_j into its neighbour."""

    facet: Facet
    axis: int
    position: float
    normal: int  # +1 or -1
    r: float
    center: np.ndarray

    def _slab(self, a: float, b: float) -> Box:
        lo = list(self.facet.lo)
        hi = list(self.facet.hi)
        u0, u1 = sorted((self.position + self.normal * a, self.position + self.normal * b))
        lo[self.axis], hi[self.axis] = u0, u1
        return Box(tuple(lo), tuple(hi))

    @property
    def c1(self) -> Box:
        return self._slab(0.0, self.r)

    @property
    def c_minus1(self) -> Box:
        return self._slab(-self.r, 0.0)

    @property
    def c_minus_half(self) -> Box:
        return self._slab(-self.r / 2, 0.0)

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "position": self.position,
            "normal": self.normal,
            "r": self.r,
            "center": self.center.tolist(),
            "C1": self.c1.to_json(),
            "C-1": self.c_minus1.to_json(),
            "C-1/2": self.c_minus_half.to_json(),
        }


def build_gate(a_j: Box, a_nb: Box, facet: Facet) -> Gate:
    ax = facet.axis
    sides = np.array([facet.hi[j] - facet.lo[j] for j in range(a_j.dim) if j != ax])
    if sides.size and not np.all(sides > 0):
        raise DomainError("degenerate facet")
    pos = facet.lo[ax]
    normal = 1 if a_nb.center[ax] > pos else -1
    thick_a = a_j.hi[ax] - a_j.lo[ax]
    thick_b = a_nb.hi[ax] - a_nb.lo[ax]
    r = min(0.5 * sides.min() if sides.size else math.inf, 0.5 * thick_a, 0.5 * thick_b)
    center = 0.5 * (np.asarray(facet.lo) + np.asarray(facet.hi))
    return Gate(facet, ax, pos, normal, r, center)


class GateMap(Stage):
    """psi: compresses the column [y_{-1}, y_1] across the facet onto
    [y_{-1}, y] with slope 1/2 and fixes every other point.

    With ``inverse`` the map expands instead. Lip(psi) = 1, Lip(psi^-1) = 2.
    """

    name = "gate"

    def __init__(self, gate: Gate, inverse: bool = False):
        self.gate = gate
        self.is_inverse = inverse
        self.bound = gate.r
        self.lip = 2.0 if inverse else 1.0
        self.lip_inverse = 1.0 if inverse else 2.0
        lo = list(gate.facet.lo)
        hi = list(gate.facet.hi)
        self.tan = [j for j in range(len(lo)) if j != gate.axis]
        self.tlo = np.array([lo[j] for j in self.tan])
        self.thi = np.array([hi[j] for j in self.tan])

    def _u(self, x):
        return (x[:, self.gate.axis] - self.gate.position) * self.gate.normal

    def _in_column(self, x):
        t = x[:, self.tan]
        return np.all((t >= self.tlo) & (t <= self.thi), axis=1)

    def _map_u(self, u):
        r = self.gate.r
        if self.is_inverse:
            return np.where((u >= -r) & (u <= 0), 2 * u + r, u)
        return np.where((u >= -r) & (u <= r), 0.5 * (u - r), u)

    def evaluate(self, points):
        x = np.array(np.atleast_2d(points), dtype=float)
        col = self._in_column(x)
        u = self._u(x[col])
        x[col, self.gate.axis] = self.gate.position + self.gate.normal * self._map_u(u)
        return x

    def push_boxes(self, wb):
        g = self.gate
        r = g.r
        ax = g.axis
        # pieces: column slab, column outside slab, outside column
        clo = np.array(g.facet.lo, dtype=float)
        chi = np.array(g.facet.hi, dtype=float)
        span = (-r, 0.0) if self.is_inverse else (-r, r)
        a, b = sorted((g.position + g.normal * span[0], g.position + g.normal * span[1]))
        clo[ax], chi[ax] = a, b
        inside, _ = intersect_boxes(wb, clo[None], chi[None])
        rest_parts = []
        for piece in _box_minus(wb.lo, wb.hi, clo, chi):
            rest_parts.append(WeightedBoxes(piece[0], piece[1], wb.dens[piece[2]]))
        out = [PushedMeasure(p, None) for p in rest_parts if len(p)]
        if len(inside):
            u0 = (inside.lo[:, ax] - g.position) * g.normal
            u1 = (inside.hi[:, ax] - g.position) * g.normal
            v0 = self._map_u(u0)
            v1 = self._map_u(u1)
            n0 = g.position + g.normal * v0
            n1 = g.position + g.normal * v1
            lo = inside.lo.copy()
            hi = inside.hi.copy()
            lo[:, ax] = np.minimum(n0, n1)
            hi[:, ax] = np.maximum(n0, n1)
            jac = 2.0 if self.is_inverse else 0.5
            out.append(PushedMeasure(WeightedBoxes(lo, hi, inside.dens / jac), None))
        return _merge(out, wb.lo.shape[1])

    def inverse(self):
        return GateMap(self.gate, not self.is_inverse)


def _box_minus(lo: np.ndarray, hi: np.ndarray, clo: np.ndarray, chi: np.ndarray):
    """Pieces of each box outside [clo, chi], as (lo, hi, owner) batches."""
    lo = lo.copy()
    hi = hi.copy()
    owner = np.arange(len(lo))
    out = []
    for j in range(lo.shape[1]):
        below = lo[:, j] < clo[j]
        if below.any():
            plo = lo[below].copy()
            phi = hi[below].copy()
            phi[:, j] = np.minimum(phi[:, j], clo[j])
            out.append((plo, phi, owner[below]))
        above = hi[:, j] > chi[j]
        if above.any():
            plo = lo[above].copy()
            phi = hi[above].copy()
            plo[:, j] = np.maximum(plo[:, j], chi[j])
            out.append((plo, phi, owner[above]))
        lo[:, j] = np.maximum(lo[:, j], clo[j])
        hi[:, j] = np.minimum(hi[:, j], chi[j])
        keep = hi[:, j] > lo[:, j]
        lo, hi, owner = lo[keep], hi[keep], owner[keep]
    return out


def gate_homeomorphism(gate: Gate) -> tuple[GateMap, GateMap, dict]:
    fwd = GateMap(gate)
    inv = fwd.inverse()
    return fwd, inv, {"lip": fwd.lip, "lip_inverse": fwd.lip_inverse}


def push_field_through_gate(f: Field, gate: Gate, box: Box) -> Field:
    """psi#f restricted to ``box`` (the image psi(D''')), as a field."""
    ax = gate.axis
    r = gate.r
    p = gate.position
    nrm = gate.normal
    e = f.edges[ax]
    src_slab = sorted((p - nrm * r, p + nrm * r))
    img_slab = sorted((p - nrm * r, p))
    inner = e[(e > src_slab[0]) & (e < src_slab[1])]
    mapped = p + nrm * 0.5 * ((inner - p) * nrm - r)
    new_axis = np.concatenate([e[(e <= img_slab[0]) | (e >= img_slab[1])], mapped, img_slab])
    new_axis = new_axis[(new_axis >= box.lo[ax]) & (new_axis <= box.hi[ax])]
    new_axis = np.unique(np.concatenate([new_axis, [box.lo[ax], box.hi[ax]]]))
    hull = Box(
        tuple(min(box.lo[j], src_slab[0]) if j == ax else box.lo[j] for j in range(f.dim)),
        tuple(max(box.hi[j], src_slab[1]) if j == ax else box.hi[j] for j in range(f.dim)),
    )
    edges = [f.restrict(hull).edges[j] if j != ax else new_axis for j in range(f.dim)]
    grids = np.meshgrid(*[0.5 * (q[1:] + q[:-1]) for q in edges], indexing="ij")
    centers = np.stack([g.ravel() for g in grids], axis=1)
    gm = GateMap(gate, inverse=True)
    src = gm.evaluate(centers)
    u = (centers[:, ax] - p) * nrm
    in_img = (u >= -r) & (u <= 0) & gm._in_column(centers)
    vals = f.evaluate(src) * np.where(in_img, 2.0, 1.0)
    return Field(edges, vals.reshape(grids[0].shape))


class Conjugated(Stage):
    """psi^{-1} o inner o psi; displacement at most Lip(psi^{-1}) * inner."""

    name = "conjugated"

    def __init__(self, gate: Gate, inner: Stage):
        self.psi, self.psi_inv, lips = gate_homeomorphism(gate)
        self.inner = inner
        self.bound = lips["lip_inverse"] * inner.bound

    def evaluate(self, points):
        return self.psi_inv.evaluate(self.inner.evaluate(self.psi.evaluate(points)))

    def pushforward(self, m):
        return self.psi_inv.pushforward(self.inner.pushforward(self.psi.pushforward(m)))

    def push_boxes(self, wb):
        return self.pushforward(wb)


class RegionStage(Stage):
    """Independent stages on disjoint regions, each a list of boxes."""

    name = "regions"

    def __init__(self, regions: list[tuple[list[Box], Stage]]):
        self.regions = regions
        self.lo = np.array([b.lo for boxes, _ in regions for b in boxes], dtype=float)
        self.hi = np.array([b.hi for boxes, _ in regions for b in boxes], dtype=float)
        self.region_of = np.concatenate([np.full(len(boxes), k) for k, (boxes, _) in enumerate(regions)])
        self.bound = float(max([0.0] + [s.bound for _, s in regions]))

    def evaluate(self, points):
        x = np.array(np.atleast_2d(points), dtype=float)
        k = locate_in_boxes(x, self.lo, self.hi)
        reg = np.where(k >= 0, self.region_of[np.maximum(k, 0)], -1)
        out = x.copy()
        for r, (_, st) in enumerate(self.regions):
            sel = reg == r
            if sel.any():
                out[sel] = st.evaluate(x[sel])
        return out

    def push_boxes(self, wb):
        parts, k = intersect_boxes(wb, self.lo, self.hi)
        reg = self.region_of[k]
        out = []
        for r, (_, st) in enumerate(self.regions):
            sel = reg == r
            if sel.any():
                out.append(st.pushforward(parts.select(sel)))
        return _merge(out, wb.lo.shape[1])


# ---------------------------------------------------------------------------
# density to density on a box union


def _masses(f: Field, boxes: list[Box]) -> float:
    return float(sum(f.mass_of_box(b) for b in boxes))


def _restrict_to(f: Field, boxes: list[Box]) -> Field:
    """f on the bounding box of ``boxes``, zero outside their union."""
    bb = BoxUnionDomain(boxes, require_connected=False).bounding_box()
    extra = [np.concatenate([[b.lo[j], b.hi[j]] for b in boxes]) for j in range(f.dim)]
    g = f.refine(extra).restrict(bb)
    grids = np.meshgrid(*[0.5 * (q[1:] + q[:-1]) for q in g.edges], indexing="ij")
    centers = np.stack([q.ravel() for q in grids], axis=1)
    lo = np.array([b.lo for b in boxes])
    hi = np.array([b.hi for b in boxes])
    inside = locate_in_boxes(centers, lo, hi) >= 0
    return Field(g.edges, np.where(inside.reshape(g.values.shape), g.values, 0.0))


def _piecewise(f: Field, parts: list[tuple[list[Box], float]]) -> Field:
    """f scaled by a constant factor on each group of boxes."""
    extra = [np.concatenate([[b.lo[j], b.hi[j]] for boxes, _ in parts for b in boxes]) for j in range(f.dim)]
    g = f.refine(extra)
    grids = np.meshgrid(*[0.5 * (q[1:] + q[:-1]) for q in g.edges], indexing="ij")
    centers = np.stack([q.ravel() for q in grids], axis=1)
    factor = np.zeros(len(centers))
    for boxes, c in parts:
        lo = np.array([b.lo for b in boxes])
        hi = np.array([b.hi for b in boxes])
        inside = locate_in_boxes(centers, lo, hi) >= 0
        factor[inside & (factor == 0)] = c
    return Field(g.edges, g.values * factor.reshape(g.values.shape))


def _trivial(f1: Field, f2: Field, domain: BoxUnionDomain, kind: str) -> ComposedTransport:
    bb = domain.bounding_box()
    kr = KnotheRosenblatt(f1.restrict(bb), f2.restrict(bb), bb, bound=domain.diameter())
    return ComposedTransport([kr], kr.bound, kind)


def wp_density_to_density(f1: Field, f2: Field, dec: WPDecomposition, lam: float | None = None) -> ComposedTransport:
    """Transport between two fields of equal mass on the decomposed union."""
    domain = dec.domain
    if not dec.steps:
        box = domain.boxes[0]
        floor = None if lam is None else 1.0 / lam
        return density_to_density_field(f1, f2, box, floor=floor)
    m1 = _masses(f1, domain.boxes)
    m2 = _masses(f2, domain.boxes)
    if abs(m1 - m2) > 1e-10 * max(m1, m2):
        raise TransportError(f"unequal masses: {m1!r} vs {m2!r}")
    g1 = _restrict_to(f1, domain.boxes)
    g2 = _restrict_to(f2, domain.boxes)
    delta = g1.sup_distance(g2)
    if delta == 0:
        return ComposedTransport([Identity()], 0.0, "wp-density", {"delta": 0.0})
    floor = 1.0 / lam if lam is not None else float(np.min(g2.values[g2.values > 0]))
    if delta > floor / 2:
        return _trivial(g1, g2, domain, "wp-density-trivial")
    step = dec.steps[0]
    sub, a_j = sub_decomposition(dec)
    nb = domain.boxes[step.neighbor]
    gate = build_gate(a_j, nb, step.facet)
    c1 = gate.c1
    d_prime = sub.domain.boxes
    int_c1_r1 = g1.mass_of_box(c1)
    int_c1_r2 = g2.mass_of_box(c1)
    excess = _masses(g1, d_prime) - _masses(g2, d_prime)
    beta = (excess + int_c1_r2) / int_c1_r1
    if beta <= 0:
        return _trivial(g1, g2, domain, "wp-density-trivial")
    # rho1~ = rho2 on D' minus C1, beta rho1 on C1, rho1 on D''
    rest = [p for b in d_prime for p in (subtract_box(b, c1) if b.intersect(c1) is not None else [b])]
    rest = [b for b in rest if b.volume > 0]
    t1 = _combine_regions(g1, g2, [(rest, "rho2"), ([c1], "beta"), ([a_j], "rho1")], beta)
    stage1 = RegionStage([(d_prime, wp_density_to_density(g1, t1, sub)), ([a_j], Identity())])
    d3 = Box(tuple(min(a, b) for a, b in zip(a_j.lo, c1.lo)), tuple(max(a, b) for a, b in zip(a_j.hi, c1.hi)))
    p1 = push_field_through_gate(t1, gate, a_j)
    p2 = push_field_through_gate(g2, gate, a_j)
    inner = density_to_density_field(p1, p2, a_j)
    stage2 = RegionStage([([d3], Conjugated(gate, inner)), (rest, Identity())])
    out = ComposedTransport([stage1, stage2], 0.0, "wp-density", {"beta": beta, "delta": delta, "gate_r": gate.r})
    out.terminal_bound = stage2.bound
    out.bound_cap = domain.diameter()
    return out


def _combine_regions(g1: Field, g2: Field, parts, beta: float) -> Field:
    extra = [np.concatenate([[b.lo[j], b.hi[j]] for boxes, _ in parts for b in boxes]) for j in range(g1.dim)]
    a = g1.refine(extra).refine(g2.edges)
    b = g2.refine(a.edges)
    grids = np.meshgrid(*[0.5 * (q[1:] + q[:-1]) for q in a.edges], indexing="ij")
    centers = np.stack([q.ravel() for q in grids], axis=1)
    vals = np.zeros(len(centers))
    done = np.zeros(len(centers), dtype=bool)
    for boxes, kind in parts:
        lo = np.array([x.lo for x in boxes])
        hi = np.array([x.hi for x in boxes])
        inside = (locate_in_boxes(centers, lo, hi) >= 0) & ~done
        src = {"rho1": a.values.ravel(), "rho2": b.values.ravel(), "beta": beta * a.values.ravel()}[kind]
        vals[inside] = src[inside]
        done |= inside
    return Field(a.edges, vals.reshape(a.values.shape))


# ---------------------------------------------------------------------------
# density to empirical measure on a box union


def cumulative_assignment(f: Field, domain: BoxUnionDomain, points: np.ndarray, n_total: int) -> ComposedTransport:
    """Cut the union into one equal-mass cell per point and send each cell
    to its point. Used when a part of the domain holds no sample."""
    bb = domain.bounding_box()
    g = _restrict_to(f, list(domain.boxes))
    owner = np.zeros(len(points), dtype=np.int64)
    cl, ch, cp = count_bisection(g, bb.lo_arr[None], bb.hi_arr[None], np.array([len(points)]), points, owner)
    stage = CellAssignment(cl, ch, points[cp])
    stage.bound = min(stage.exact_displacement, domain.diameter())
    return ComposedTransport([stage], stage.bound, "cumulative-assignment")


def box_solver(f: Field, box: Box, points: np.ndarray, n_total: int, alpha: float = 3.0, l_cfg: float = 1.0) -> ComposedTransport:
    """Planar boxes use the Hall matching, higher dimensions the dyadic scheme."""
    if box.dim == 2:
        ht = hall_matching_2d(f.restrict(box), points, l_cfg=l_cfg, n_total=n_total, box=box)
        stage = CellAssignment(ht.lo, ht.hi, ht.targets, bound=ht.displacement)
        out = ComposedTransport([stage], stage.bound, "hall2d")
        out.info = {
            "escalated": bool(ht.matching.escalated),
            "threshold": ht.threshold,
            "bottleneck_radius": ht.matching.bottleneck_radius,
        }
        return out
    out = empirical_coupling_highd(f, points, alpha=alpha, box=box, n_total=n_total)
    out.info["escalated"] = False
    return out


def wp_empirical(
    f: Field, points: np.ndarray, dec: WPDecomposition, n_total: int, alpha: float = 3.0, l_cfg: float = 1.0
) -> ComposedTransport:
    """Transport from f (mass len(points)/n_total on the union) onto the sample.

    Every box A_i is first given the mass nu_n(A_i) by rescaling f on it; the
    rescaled density is reached through the gates, and each box is then
    solved on its own.
    """
    domain = dec.domain
    boxes = list(domain.boxes)
    if not dec.steps:
        return box_solver(f, boxes[0], points, n_total, alpha, l_cfg)
    lo, hi = domain.box_arrays()
    k = locate_in_boxes(points, lo, hi)
    counts = np.bincount(k, minlength=len(boxes))
    if np.any(counts == 0):
        return cumulative_assignment(f, domain, points, n_total)
    mass = np.array([f.mass_of_box(b) for b in boxes])
    target = _piecewise(f, [([b], (c / n_total) / m) for b, c, m in zip(boxes, counts, mass)])
    g = _restrict_to(f, boxes)
    stage1 = wp_density_to_density(g, _restrict_to(target, boxes), dec)
    solvers = [box_solver(target, b, points[k == i], n_total, alpha, l_cfg) for i, b in enumerate(boxes)]
    stage2 = RegionStage([([b], s) for b, s in zip(boxes, solvers)])
    stage1.bound_cap = domain.diameter()
    escalated = any(s.info.get("escalated", False) for s in solvers)
    out = ComposedTransport(
        [stage1, stage2],
        stage2.bound,
        "wp-empirical",
        {"escalated": escalated, "counts": counts.tolist(), "rebalance_bound": stage1.certified_bound},
    )
    out.bound_cap = domain.diameter()
    return out


def rebalance_and_recurse(
    rho1: Density,
    target: Density | EmpiricalMeasure,
    decomposition: WPDecomposition | None = None,
    alpha: float = 3.0,
    l_cfg: float = 1.0,
) -> ComposedTransport:
    """Transport on a box union from a density onto a density or a sample."""
    dec = decomposition if decomposition is not None else build_wp(rho1.domain)
    f1 = rho1.require_field()
    if isinstance(target, EmpiricalMeasure):
        if target.n == 0:
            raise TransportError("empty sample")
        return wp_empirical(f1, target.points, dec, target.n, alpha, l_cfg)
    f2 = target.require_field()
    if not dec.steps:
        lam = max(rho1.lam, target.lam)
        return density_to_density_field(f1, f2, dec.domain.boxes[0], floor=1.0 / lam)
    return wp_density_to_density(f1, f2, dec, max(rho1.lam, target.lam))
