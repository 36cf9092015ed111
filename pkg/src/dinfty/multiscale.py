"""Composed transport maps built from dyadic partitions.

A :class:`ComposedTransport` is an ordered list of stages. Every stage maps
points (``evaluate``), maps measures exactly (``pushforward`` on
:class:`~dinfty.core.PushedMeasure`) and carries a certified bound on its
displacement; the bound of the composition is the sum of the stage bounds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Atoms,
    Box,
    Density,
    EmpiricalMeasure,
    Field,
    PushedMeasure,
    WeightedBoxes,
    field_combine,
    intersect_boxes,
    is_constant_on,
    locate_in_boxes,
    point_box_farthest,
    times_field,
)
from .partition import PartitionTree, build_tree, dyadic_lebesgue, dyadic_nu
from .transport1d import PiecewiseConstantDensity1D, cdf_transport, two_valued_map

MASS_RTOL = 1e-12
MAX_AUTO_DEPTH = 22


class TransportError(ValueError):
    pass


def _empty_boxes(d: int) -> WeightedBoxes:
    return WeightedBoxes.empty(d)


def _as_pushed(m) -> PushedMeasure:
    if isinstance(m, PushedMeasure):
        return m
    if isinstance(m, WeightedBoxes):
        return PushedMeasure(boxes=m)
    raise TypeError(f"cannot push {type(m).__name__}")


def _merge(parts: list[PushedMeasure], d: int) -> PushedMeasure:
    boxes = [p.boxes for p in parts if p.boxes is not None and len(p.boxes)]
    atoms = [p.atoms for p in parts if p.atoms is not None and len(p.atoms.masses)]
    wb = WeightedBoxes.concat(boxes) if boxes else _empty_boxes(d)
    at = Atoms(np.concatenate([a.points for a in atoms]), np.concatenate([a.masses for a in atoms])) if atoms else None
    return PushedMeasure(wb, at)


def _dim_of(pm: PushedMeasure) -> int:
    if pm.boxes is not None and pm.boxes.lo.ndim == 2 and pm.boxes.lo.shape[1]:
        return pm.boxes.lo.shape[1]
    return pm.atoms.points.shape[1]


class Stage:
    bound: float = 0.0
    name: str = "stage"

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def push_boxes(self, wb: WeightedBoxes) -> PushedMeasure:
        raise NotImplementedError

    def pushforward(self, m) -> PushedMeasure:
        pm = _as_pushed(m)
        d = _dim_of(pm)
        parts = []
        if pm.boxes is not None and len(pm.boxes):
            parts.append(self.push_boxes(pm.boxes))
        if pm.atoms is not None and len(pm.atoms.masses):
            parts.append(PushedMeasure(None, Atoms(self.evaluate(pm.atoms.points), pm.atoms.masses)))
        return _merge(parts, d) if parts else PushedMeasure(_empty_boxes(d), None)

    def inverse(self) -> Stage:
        raise TransportError(f"{type(self).__name__} has no inverse")

    def summary(self) -> dict:
        return {"stage": self.name, "bound": self.bound}

    def __call__(self, points):
        return self.evaluate(points)


class Identity(Stage):
    name = "identity"

    def evaluate(self, points):
        return np.array(np.atleast_2d(points), dtype=float)

    def push_boxes(self, wb):
        return PushedMeasure(wb, None)

    def inverse(self):
        return self


# ---------------------------------------------------------------------------
# one level of a dyadic tree


def frontier(tree: PartitionTree, k: int) -> np.ndarray:
    """Nodes tiling the root at level k (earlier leaves included)."""
    if not hasattr(tree, "_frontiers"):
        tree._frontiers = {}
    if k not in tree._frontiers:
        tree._frontiers[k] = np.flatnonzero((tree.level == k) | ((tree.level < k) & (tree.left < 0)))
    return tree._frontiers[k]


class LevelMap(Stage):
    """On every split node Q at ``level``: the monotone map along the split
    axis sending [lo, s*] onto [lo, t*] and [s*, hi] onto [t*, hi], identity
    on the other axes. Nodes listed in ``sub_maps`` use their own transport
    (confined to Q) instead.
    """

    name = "level"

    def __init__(
        self,
        tree: PartitionTree,
        level: int,
        kink: np.ndarray,
        sub_maps: dict[int, Stage] | None = None,
        inverse: bool = False,
    ):
        self.tree = tree
        self.level = level
        self.kink = kink  # per node, NaN where unused
        self.sub_maps = sub_maps or {}
        self.is_inverse = inverse
        nodes = np.flatnonzero((tree.level == level) & (tree.left >= 0))
        self.nodes = nodes
        disp = np.abs(tree.pos[nodes] - kink[nodes])
        disp = disp[np.isfinite(disp)]
        sub = [m.bound for m in self.sub_maps.values()]
        self.bound = float(max([0.0] + list(disp) + sub))
        self.two_valued_bound = float(disp.max()) if disp.size else 0.0

    @property
    def k(self) -> int:
        return self.level

    def _src_dst(self, nd):
        t = self.tree.pos[nd]
        s = self.kink[nd]
        return (t, s) if self.is_inverse else (s, t)

    def _locate(self, points):
        return self.tree.locate(points, depth=self.level)

    def evaluate(self, points):
        x = np.array(np.atleast_2d(points), dtype=float)
        node = self._locate(x)
        active = (self.tree.level[node] == self.level) & (self.tree.left[node] >= 0)
        if self.sub_maps:
            for nd, m in self.sub_maps.items():
                sel = np.flatnonzero(node == nd)
                if sel.size:
                    x[sel] = m.evaluate(x[sel])
            active &= np.isfinite(self.kink[node])
        idx = np.flatnonzero(active)
        if idx.size == 0:
            return x
        nd = node[idx]
        ax = self.tree.axis[nd]
        lo = self.tree.lo[nd, ax]
        hi = self.tree.hi[nd, ax]
        src, dst = self._src_dst(nd)
        v = x[idx, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = lo + (v - lo) * np.where(src > lo, (dst - lo) / (src - lo), 0.0)
            right = dst + (v - src) * np.where(hi > src, (hi - dst) / (hi - src), 0.0)
        x[idx, ax] = np.where(v <= src, left, right)
        return x

    def push_boxes(self, wb):
        d = wb.lo.shape[1]
        front = frontier(self.tree, self.level)
        wb, k = intersect_boxes(wb, self.tree.lo[front], self.tree.hi[front])
        node = front[k]
        active = (self.tree.level[node] == self.level) & (self.tree.left[node] >= 0)
        out = []
        if self.sub_maps:
            for nd, m in self.sub_maps.items():
                sel = node == nd
                if sel.any():
                    res = m.pushforward(wb.select(sel))
                    out.append(self._clip_children(res, nd))
            active &= np.isfinite(self.kink[node])
        passive = ~active & ~np.isin(node, list(self.sub_maps))
        if passive.any():
            out.append(PushedMeasure(wb.select(passive), None))
        idx = np.flatnonzero(active)
        if idx.size:
            nd = node[idx]
            ax = self.tree.axis[nd]
            rows = np.arange(idx.size)
            lo_n = self.tree.lo[nd, ax]
            hi_n = self.tree.hi[nd, ax]
            src, dst = self._src_dst(nd)
            blo = wb.lo[idx]
            bhi = wb.hi[idx]
            dens = wb.dens[idx]
            pieces_lo, pieces_hi, pieces_d = [], [], []
            for side in (0, 1):
                if side == 0:
                    a = blo[rows, ax]
                    b = np.minimum(bhi[rows, ax], src)
                    s0, s1, t0, t1 = lo_n, src, lo_n, dst
                else:
                    a = np.maximum(blo[rows, ax], src)
                    b = bhi[rows, ax]
                    s0, s1, t0, t1 = src, hi_n, dst, hi_n
                keep = (b > a) & (s1 > s0)
                if not keep.any():
                    continue
                r = rows[keep]
                slope = (t1[keep] - t0[keep]) / (s1[keep] - s0[keep])
                na = t0[keep] + (a[keep] - s0[keep]) * slope
                nb = t0[keep] + (b[keep] - s0[keep]) * slope
                plo = blo[r].copy()
                phi = bhi[r].copy()
                plo[np.arange(r.size), ax[r]] = na
                phi[np.arange(r.size), ax[r]] = nb
                good = nb > na
                if (~good).any() and np.any(dens[r][~good] > 0):
                    raise TransportError("level map collapsed a piece carrying mass")
                pieces_lo.append(plo[good])
                pieces_hi.append(phi[good])
                pieces_d.append(dens[r][good] / slope[good])
            if pieces_lo:
                out.append(PushedMeasure(WeightedBoxes(np.concatenate(pieces_lo), np.concatenate(pieces_hi), np.concatenate(pieces_d)), None))
        return _merge(out, d) if out else PushedMeasure(_empty_boxes(d), None)

    def _clip_children(self, pm: PushedMeasure, nd: int) -> PushedMeasure:
        if self.is_inverse or pm.boxes is None or not len(pm.boxes):
            return pm
        kids = [self.tree.left[nd], self.tree.right[nd]]
        parts, _ = intersect_boxes(pm.boxes, self.tree.lo[kids], self.tree.hi[kids])
        return PushedMeasure(parts, pm.atoms)

    def inverse(self):
        subs = {k: v.inverse() for k, v in self.sub_maps.items()}
        return LevelMap(self.tree, self.level, self.kink, subs, not self.is_inverse)

    def summary(self):
        return {"stage": self.name, "k": self.level, "max_displacement": self.bound}


# ---------------------------------------------------------------------------
# Knothe-Rosenblatt map between piecewise-constant fields on a box


class _KRNode:
    def __init__(self, src_vals, src_edges, tgt_vals, tgt_edges):
        d = len(src_edges)
        self.dim = d
        s_w = _widths(src_edges[1:])
        t_w = _widths(tgt_edges[1:])
        s_line = np.tensordot(src_vals, s_w, axes=d - 1) if d > 1 else src_vals
        t_line = np.tensordot(tgt_vals, t_w, axes=d - 1) if d > 1 else tgt_vals
        src = PiecewiseConstantDensity1D(src_edges[0], s_line)
        tgt = PiecewiseConstantDensity1D(tgt_edges[0], t_line)
        self.map = cdf_transport(src, tgt, rtol=1e-9)
        mids = 0.5 * (self.map.knots[:-1] + self.map.knots[1:])
        self.src_col = np.clip(np.searchsorted(src_edges[0], mids, side="right") - 1, 0, len(s_line) - 1)
        tmid = 0.5 * (self.map.left + self.map.right)
        self.tgt_col = np.clip(np.searchsorted(tgt_edges[0], tmid, side="right") - 1, 0, len(t_line) - 1)
        self.children: dict[tuple[int, int], _KRNode] = {}
        self.piece_child: list[_KRNode | None] = []
        for p in range(len(self.map.left)):
            child = None
            if d > 1 and self.map.active[p]:
                key = (int(self.src_col[p]), int(self.tgt_col[p]))
                if key not in self.children:
                    i, j = key
                    sv = src_vals[i] / s_line[i]
                    tv = tgt_vals[j] / t_line[j]
                    self.children[key] = _KRNode(sv, src_edges[1:], tv, tgt_edges[1:])
                child = self.children[key]
            self.piece_child.append(child)

    def evaluate(self, x):
        y = x.copy()
        y[:, 0] = self.map(x[:, 0])
        if self.dim == 1:
            return y
        piece = self.map._piece(x[:, 0])
        for p in np.unique(piece):
            child = self.piece_child[p]
            if child is None:
                continue
            sel = piece == p
            y[sel, 1:] = child.evaluate(x[sel, 1:])
        return y

    def push(self, lo, hi, dens):
        """Exact image of weighted boxes in this node's coordinates.

        Returns lo, hi, density and, for each output piece, the input row
        it came from.
        """
        out_lo, out_hi, out_d, out_own = [], [], [], []
        m = self.map
        for p in range(len(m.left)):
            s0, s1 = m.knots[p], m.knots[p + 1]
            a = np.maximum(lo[:, 0], s0)
            b = np.minimum(hi[:, 0], s1)
            keep = np.flatnonzero(b > a)
            if keep.size == 0:
                continue
            slope = (m.right[p] - m.left[p]) / (s1 - s0)
            if slope <= 0 or not m.active[p]:
                if m.active[p] and np.any(dens[keep] > 0):
                    raise TransportError("Knothe-Rosenblatt piece collapsed mass")
                continue
            na = m.left[p] + (a[keep] - s0) * slope
            nb = m.left[p] + (b[keep] - s0) * slope
            dd = dens[keep] / slope
            if self.dim == 1:
                out_lo.append(na[:, None])
                out_hi.append(nb[:, None])
                out_d.append(dd)
                out_own.append(keep)
                continue
            child = self.piece_child[p]
            clo, chi, cd, own = child.push(lo[keep, 1:], hi[keep, 1:], dd)
            out_lo.append(np.column_stack([na[own], clo]))
            out_hi.append(np.column_stack([nb[own], chi]))
            out_d.append(cd)
            out_own.append(keep[own])
        if not out_lo:
            return np.zeros((0, self.dim)), np.zeros((0, self.dim)), np.zeros(0), np.zeros(0, dtype=np.int64)
        return np.concatenate(out_lo), np.concatenate(out_hi), np.concatenate(out_d), np.concatenate(out_own)

    def max_disp2(self) -> float:
        best = 0.0
        m = self.map
        for p in range(len(m.left)):
            if not m.active[p]:
                continue
            dp = max(abs(m.left[p] - m.knots[p]), abs(m.right[p] - m.knots[p + 1]))
            rest = self.piece_child[p].max_disp2() if self.piece_child[p] is not None else 0.0
            best = max(best, dp * dp + rest)
        return best


def _widths(edges):
    w = np.ones(())
    for e in edges:
        w = np.multiply.outer(w, np.diff(e))
    return w


class KnotheRosenblatt(Stage):
    """Triangular monotone map between two fields of equal mass on a box.

    On each cell of the common refinement the map is affine and diagonal,
    so the displacement is maximised at cell corners and is computed exactly.
    """

    name = "knothe-rosenblatt"

    def __init__(self, source: Field, target: Field, box: Box, bound: float | None = None):
        s = source.restrict(box)
        t = target.restrict(box)
        ms, mt = s.total(), t.total()
        if abs(ms - mt) > 1e-9 * max(ms, mt):
            raise TransportError(f"unequal masses: {ms!r} vs {mt!r}")
        self.box = box
        self.source = s
        self.target = t
        self.root = _KRNode(s.values, list(s.edges), t.values, list(t.edges))
        self.exact_displacement = math.sqrt(self.root.max_disp2())
        self.bound = self.exact_displacement if bound is None else bound

    def evaluate(self, points):
        x = np.array(np.atleast_2d(points), dtype=float)
        return self.root.evaluate(x)

    def push_boxes(self, wb):
        lo, hi, dens, _ = self.root.push(wb.lo, wb.hi, wb.dens)
        return PushedMeasure(WeightedBoxes(lo, hi, dens), None)

    def inverse(self):
        return KnotheRosenblatt(self.target, self.source, self.box, self.bound)


class LeafMaps(Stage):
    """Independent transports on the leaves of a tree; identity elsewhere."""

    name = "leaf-maps"

    def __init__(self, tree: PartitionTree, maps: dict[int, Stage], bound: float | None = None):
        self.tree = tree
        self.maps = maps
        self.bound = float(max([0.0] + [m.bound for m in maps.values()])) if bound is None else bound

    def evaluate(self, points):
        x = np.array(np.atleast_2d(points), dtype=float)
        node = self.tree.locate(x)
        for nd in np.unique(node):
            m = self.maps.get(int(nd))
            if m is not None:
                sel = node == nd
                x[sel] = m.evaluate(x[sel])
        return x

    def push_boxes(self, wb):
        d = wb.lo.shape[1]
        leaves = self.tree.leaves()
        wb, k = intersect_boxes(wb, self.tree.lo[leaves], self.tree.hi[leaves])
        node = leaves[k]
        out = []
        rest = np.ones(len(node), dtype=bool)
        for nd, m in self.maps.items():
            sel = node == nd
            if sel.any():
                out.append(m.pushforward(wb.select(sel)))
                rest &= ~sel
        if rest.any():
            out.append(PushedMeasure(wb.select(rest), None))
        return _merge(out, d)

    def inverse(self):
        return LeafMaps(self.tree, {k: v.inverse() for k, v in self.maps.items()}, self.bound)


# ---------------------------------------------------------------------------
# assignment of cells to sample points


class CellAssignment(Stage):
    """Every cell (closed box) is sent to one target point."""

    name = "assignment"

    def __init__(self, lo: np.ndarray, hi: np.ndarray, targets: np.ndarray, bound: float | None = None):
        self.lo = lo
        self.hi = hi
        self.targets = targets
        exact = float(point_box_farthest(targets, lo, hi).max()) if len(lo) else 0.0
        self.exact_displacement = exact
        self.bound = exact if bound is None else bound

    def evaluate(self, points):
        x = np.array(np.atleast_2d(points), dtype=float)
        k = locate_in_boxes(x, self.lo, self.hi)
        ok = k >= 0
        x[ok] = self.targets[k[ok]]
        return x

    def push_boxes(self, wb):
        parts, cell = intersect_boxes(wb, self.lo, self.hi)
        mass = parts.dens * np.prod(parts.hi - parts.lo, axis=1)
        total = np.bincount(cell, weights=mass, minlength=len(self.lo))
        used = np.flatnonzero(total > 0)
        lost = wb.total() - mass.sum()
        if abs(lost) > 1e-9 * max(1.0, wb.total()):
            raise TransportError(f"cells do not cover the measure (lost mass {lost!r})")
        return PushedMeasure(_empty_boxes(wb.lo.shape[1]), Atoms(self.targets[used], total[used]))


# ---------------------------------------------------------------------------
# mixture coupling of the density-to-density step


class Mixture(Stage):
    """Coupling (Id, Id)#(rho2 - m) + (S, Id)#(m dx) from rho1 to rho2.

    Mass at x stays with probability (rho2 - m)/rho1 and otherwise follows
    S^{-1}; ``evaluate`` returns the moving branch.
    """

    name = "mixture"

    def __init__(self, rho1: Field, rho2: Field, floor: float, s_forward: ComposedTransport, box: Box):
        self.box = box
        self.floor = floor
        self.rho1 = rho1
        self.rho2 = rho2
        self.s_forward = s_forward
        self.s_inverse = s_forward.inverse()
        with np.errstate(divide="ignore", invalid="ignore"):
            self.stay_ratio = field_combine(rho2, rho1, lambda b, a: np.where(a > 0, np.clip((b - floor) / a, 0, 1), 0.0))
        self.move_ratio = Field(self.stay_ratio.edges, np.where(self.stay_ratio.values > 0, 1 - self.stay_ratio.values, 1.0))
        self.bound = s_forward.certified_bound

    def evaluate(self, points):
        return self.s_inverse.evaluate(points)

    def push_boxes(self, wb):
        d = wb.lo.shape[1]
        stay = times_field(wb, self.stay_ratio)
        move = times_field(wb, self.move_ratio)
        return _merge([PushedMeasure(stay, None), self.s_inverse.pushforward(move)], d)

    def inverse(self):
        raise TransportError("the mixture coupling is not invertible as a map")


# ---------------------------------------------------------------------------


@dataclass
class ComposedTransport(Stage):
    stages: list
    terminal_bound: float = 0.0
    kind: str = "composed"
    info: dict = field(default_factory=dict)

    name = "composed"

    bound_cap: float = math.inf

    @property
    def certified_bound(self) -> float:
        # a map of the domain into itself never moves farther than its diameter
        return float(min(sum(s.bound for s in self.stages), self.bound_cap))

    @property
    def bound(self) -> float:  # type: ignore[override]
        return self.certified_bound

    def evaluate(self, points):
        x = np.array(np.atleast_2d(points), dtype=float)
        for s in self.stages:
            x = s.evaluate(x)
        return x

    vectorized = True

    def __call__(self, points):
        return self.evaluate(points)

    def pushforward(self, m) -> PushedMeasure:
        pm = _as_pushed(m)
        for s in self.stages:
            pm = s.pushforward(pm)
        return pm

    def push_boxes(self, wb):
        return self.pushforward(wb)

    def inverse(self):
        return ComposedTransport([s.inverse() for s in reversed(self.stages)], self.terminal_bound, self.kind + "-inverse", dict(self.info))

    def levels(self) -> list[dict]:
        return [s.summary() for s in self.stages if isinstance(s, LevelMap)]

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "levels": [{"k": s.level, "max_displacement": s.bound} for s in self.stages if isinstance(s, LevelMap)],
            "terminal_bound": self.terminal_bound,
            "certified_bound": self.certified_bound,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary())


def identity_transport(kind: str = "identity") -> ComposedTransport:
    return ComposedTransport([Identity()], 0.0, kind)


# ---------------------------------------------------------------------------
# uniform to density on a box


def auto_depth(rel_dev: float, d: int) -> int:
    """Smallest k with 2^{-k/d} <= rel_dev."""
    if rel_dev <= 0:
        return MAX_AUTO_DEPTH
    return max(0, math.ceil(-d * math.log2(rel_dev) - 1e-12))


def _field_on(density: Density | Field, box: Box) -> Field:
    f = density.require_field() if isinstance(density, Density) else density
    return f.restrict(box)


def uniform_to_density_field(
    rho: Field, box: Box, depth: int | str = "auto", a: float | None = None, max_depth: int = MAX_AUTO_DEPTH
) -> ComposedTransport:
    """Transport from the constant a = mass/vol on ``box`` onto ``rho``.

    Levels of Lebesgue bisection move the conditional averages rho_k onto
    rho_{k+1}; boxes on which rho is already constant are not split further.
    """
    f = rho.restrict(box)
    mass = f.total()
    vol = box.volume
    if a is None:
        a = mass / vol
    if abs(a * vol - mass) > MASS_RTOL * max(mass, 1e-300) * 10:
        raise TransportError("unequal masses")
    dev = float(np.abs(f.values - a).max())
    d = box.dim
    if dev == 0:
        return ComposedTransport([Identity()], 0.0, "uniform-to-density", {"depth": 0, "rel_dev": 0.0})
    rel = dev / a
    if rel > 0.5:
        kr = KnotheRosenblatt(Field.constant(box, a), f, box, bound=box.diameter())
        return ComposedTransport([kr], kr.bound, "uniform-to-density-trivial", {"rel_dev": rel})
    k_auto = auto_depth(rel, d)
    k = min(k_auto, max_depth) if depth == "auto" else int(depth)

    def rule(lo, hi, ax):
        rows = np.arange(len(lo))
        return 0.5 * (lo[rows, ax] + hi[rows, ax])

    tree = build_tree(box, k, rule, f.mass, "lebesgue", keep_splitting=lambda lo, hi: ~is_constant_on(f, lo, hi))
    vols = np.prod(tree.hi - tree.lo, axis=1)
    dens = tree.nu_mass / vols
    kink = np.full(len(tree.level), np.nan)
    split = np.flatnonzero(tree.left >= 0)
    ax = tree.axis[split]
    lo_a = tree.lo[split, ax]
    hi_a = tree.hi[split, ax]
    s, _ = two_valued_map(lo_a, hi_a, tree.pos[split], dens[split], dens[tree.left[split]], dens[tree.right[split]])
    kink[split] = s
    stages: list[Stage] = [LevelMap(tree, lvl, kink) for lvl in range(tree.depth) if np.any(tree.level[split] == lvl)]
    leaves = tree.leaves()
    open_leaves = leaves[~is_constant_on(f, tree.lo[leaves], tree.hi[leaves])] if len(leaves) else leaves
    terminal = 0.0
    if len(open_leaves):
        maps = {}
        for nd in open_leaves:
            lb = Box(tuple(tree.lo[nd]), tuple(tree.hi[nd]))
            maps[int(nd)] = KnotheRosenblatt(Field.constant(lb, dens[nd]), f, lb)
        terminal = max(m.bound for m in maps.values())
        stages.append(LeafMaps(tree, maps, terminal))
    out = ComposedTransport(stages, terminal, "uniform-to-density", {"depth": k, "auto_depth": k_auto, "rel_dev": rel})
    out.tree = tree
    return out


def uniform_to_density(density: Density | Field, depth: int | str = "auto", box: Box | None = None) -> ComposedTransport:
    """Transport from the uniform measure of equal mass onto ``density`` on a box."""
    if box is None:
        if isinstance(density, Density):
            if len(density.domain.boxes) != 1:
                raise TransportError("uniform_to_density works on a single box")
            box = density.domain.boxes[0]
        else:
            box = density.support_box()
    return uniform_to_density_field(_field_on(density, box), box, depth)


# ---------------------------------------------------------------------------
# density to density on a box


def density_to_density_field(
    rho1: Field, rho2: Field, box: Box, floor: float | None = None, max_depth: int = MAX_AUTO_DEPTH
) -> ComposedTransport:
    f1 = rho1.restrict(box)
    f2 = rho2.restrict(box)
    m1, m2 = f1.total(), f2.total()
    if abs(m1 - m2) > 1e-10 * max(m1, m2):
        raise TransportError(f"unequal masses: {m1!r} vs {m2!r}")
    delta = f1.sup_distance(f2)
    if delta == 0:
        return ComposedTransport([Identity()], 0.0, "density-to-density", {"delta": 0.0})
    if floor is None:
        floor = float(f2.values.min())
    if not delta <= floor / 2:
        kr = KnotheRosenblatt(f1, f2, box, bound=box.diameter())
        return ComposedTransport([kr], kr.bound, "density-to-density-trivial", {"delta": delta, "floor": floor})
    g = field_combine(f1, f2, lambda a, b: a - b + floor)
    s = uniform_to_density_field(g, box, "auto", a=None, max_depth=max_depth)
    mix = Mixture(f1, f2, floor, s, box)
    return ComposedTransport([mix], s.terminal_bound, "density-to-density", {"delta": delta, "floor": floor, "inner": s.info})


def density_to_density(rho1: Density, rho2: Density, max_depth: int = MAX_AUTO_DEPTH) -> ComposedTransport:
    """Transport between two densities on the same box.

    The common part rho2 - 1/lambda stays in place; the remainder g =
    rho1 - rho2 + 1/lambda is carried to the uniform level 1/lambda.
    """
    if len(rho1.domain.boxes) != 1 or rho1.domain.boxes != rho2.domain.boxes:
        raise TransportError("density_to_density needs both densities on the same single box")
    box = rho1.domain.boxes[0]
    lam = max(rho1.lam, rho2.lam)
    return density_to_density_field(rho1.require_field(), rho2.require_field(), box, floor=1.0 / lam, max_depth=max_depth)


# ---------------------------------------------------------------------------
# density to empirical measure (d >= 3 scheme)


def cutoff_level(n: int, alpha: float, const: float = 10.0) -> int:
    """floor(log2(n / (const * alpha * ln n)))."""
    if n < 2:
        return 0
    return int(math.floor(math.log2(n / (const * alpha * math.log(n)))))


def count_bisection(
    rho: Field, lo: np.ndarray, hi: np.ndarray, counts: np.ndarray, points: np.ndarray, owner: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split each box holding m points into m cells of equal rho-mass.

    Returns cell lo, cell hi and the index of the point each cell is sent to.
    Cuts go through the longest side with floor(m/2) units on the lower
    side, which also receives the floor(m/2) points of smallest coordinate.
    """
    keep = counts > 0
    lo, hi, counts = lo[keep], hi[keep], counts[keep]
    group_of_box = np.full(len(keep), -1, dtype=np.int64)
    group_of_box[np.flatnonzero(keep)] = np.arange(keep.sum())
    group = group_of_box[owner]
    idx = np.arange(len(points))
    done_lo, done_hi, done_pt = [], [], []
    m = counts.copy()
    while len(m):
        fin = m == 1
        if fin.any():
            gsel = np.flatnonzero(fin)
            mask = np.isin(group, gsel)
            order = np.argsort(group[mask], kind="stable")
            done_lo.append(lo[fin])
            done_hi.append(hi[fin])
            done_pt.append(idx[mask][order])
            remap = np.full(len(m), -1, dtype=np.int64)
            remap[~fin] = np.arange((~fin).sum())
            group = remap[group[~mask]]
            idx = idx[~mask]
            lo, hi, m = lo[~fin], hi[~fin], m[~fin]
        if not len(m):
            break
        ax = np.argmax(hi - lo, axis=1)
        low = m // 2
        t = rho.split_position(lo, hi, ax, low / m)
        coord = points[idx, ax[group]]
        order = np.lexsort((coord, group))
        group = group[order]
        idx = idx[order]
        starts = np.concatenate([[0], np.cumsum(m)[:-1]])
        rank = np.arange(len(group)) - starts[group]
        upper = rank >= low[group]
        rows = np.arange(len(m))
        lo2 = np.concatenate([lo, lo])
        hi2 = np.concatenate([hi, hi])
        hi2[rows, ax] = t
        lo2[len(m) + rows, ax] = t
        group = group + upper * len(m)
        lo, hi, m = lo2, hi2, np.concatenate([low, m - low])
    return np.concatenate(done_lo), np.concatenate(done_hi), np.concatenate(done_pt)


def empirical_coupling_highd(
    density: Density | Field,
    sample: EmpiricalMeasure | np.ndarray,
    alpha: float = 3.0,
    box: Box | None = None,
    n_total: int | None = None,
    kn_const: float = 10.0,
    mixture_depth: int = 6,
) -> ComposedTransport:
    """Map from ``density`` (of mass n_local/n_total) onto the sample.

    Levels follow the measure bisection F_k up to k_n; on a box Q the
    intermediate measure is (nu_n(Q)/nu(Q)) rho. Each leaf is finally cut
    into one cell per sample point.
    """
    pts = sample.points if isinstance(sample, EmpiricalMeasure) else np.atleast_2d(sample)
    n_loc = len(pts)
    n_total = n_loc if n_total is None else n_total
    if box is None:
        box = density.domain.boxes[0] if isinstance(density, Density) else density.support_box()
    f = _field_on(density, box)
    lam = density.lam if isinstance(density, Density) else math.inf
    if n_loc == 0:
        raise TransportError("empty sample")
    mass = f.total()
    if abs(mass - n_loc / n_total) > 1e-9 * max(mass, 1e-300):
        raise TransportError(f"density mass {mass!r} differs from the sample mass {n_loc / n_total!r}")
    k_n = cutoff_level(n_loc, alpha, kn_const)
    depth = max(k_n, 0)
    tree = dyadic_nu(f, box, depth, check_aspect=math.isfinite(lam))
    counts = np.zeros(len(tree.level), dtype=np.int64)
    for k in range(depth + 1):
        node = tree.locate(pts, depth=k)
        np.add.at(counts, node, 1)
    stages: list[Stage] = []
    kink = np.full(len(tree.level), np.nan)
    if depth >= 1:
        split = np.flatnonzero(tree.left >= 0)
        const = is_constant_on(f, tree.lo[split], tree.hi[split])
        # density factor of mu_k relative to rho on each node
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(tree.nu_mass > 0, counts / (n_total * tree.nu_mass), 0.0)
        cs = c[split]
        c1 = c[tree.left[split]]
        c2 = c[tree.right[split]]
        ax = tree.axis[split]
        lo_a = tree.lo[split, ax]
        hi_a = tree.hi[split, ax]
        t = tree.pos[split]
        # rho constant on Q: the two-valued map; an empty Q carries no mass
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(cs > 0, lo_a + c1 * (t - lo_a) / np.where(cs > 0, cs, 1.0), t)
        s = np.clip(s, lo_a, hi_a)
        kink[split[const]] = s[const]
        kink[split[(cs == 0)]] = t[cs == 0]
        for lvl in range(depth):
            subs: dict[int, Stage] = {}
            at_level = (tree.level[split] == lvl) & ~const & (cs > 0)
            for i in np.flatnonzero(at_level):
                nd = int(split[i])
                qb = Box(tuple(tree.lo[nd]), tuple(tree.hi[nd]))
                src = f.restrict(qb).scaled(cs[i])
                kids = [tree.left[nd], tree.right[nd]]
                tgt = _two_level_field(f.restrict(qb), qb, int(ax[i]), float(t[i]), c1[i], c2[i])
                subs[nd] = density_to_density_field(src, tgt, qb, max_depth=mixture_depth)
            stages.append(LevelMap(tree, lvl, kink, subs))
    leaves = tree.level_nodes(depth) if depth >= 1 else np.array([0])
    owner_node = tree.locate(pts, depth=depth)
    pos_in_leaf = np.full(len(tree.level), -1, dtype=np.int64)
    pos_in_leaf[leaves] = np.arange(len(leaves))
    cl, ch, cp = count_bisection(f, tree.lo[leaves], tree.hi[leaves], counts[leaves], pts, pos_in_leaf[owner_node])
    term = CellAssignment(cl, ch, pts[cp])
    stages.append(term)
    out = ComposedTransport(stages, term.bound, "highd", {"k_n": k_n, "n": n_loc, "alpha": alpha})
    out.tree = tree
    out.counts = counts
    out.cells = (cl, ch, cp)
    return out


def _two_level_field(f: Field, box: Box, axis: int, t: float, c1: float, c2: float) -> Field:
    extra = [[] for _ in range(box.dim)]
    extra[axis] = [t]
    g = f.refine(extra)
    centers = 0.5 * (g.edges[axis][1:] + g.edges[axis][:-1])
    factor = np.where(centers < t, c1, c2)
    shape = [1] * box.dim
    shape[axis] = len(factor)
    return Field(g.edges, g.values * factor.reshape(shape))
