"""Domains, piecewise-constant densities, empirical samples and mass audits.

Every density handled by the transport schemes is piecewise constant on a
rectilinear grid (a tensor product of sorted edge vectors). Cells lying
outside the domain carry the value zero, so a density on a union of boxes is
just a field whose support is that union.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

SAMPLER_ID = "philox4x64-rejection-v1"
_ALPHABET = "abcdefghijklm"


class DomainError(ValueError):
    pass


class DensityError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``[lo, hi]``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or not lo:
            raise DomainError("lo and hi must have the same positive length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise DomainError(f"degenerate box lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def unit(cls, d: int) -> Box:
        return cls((0.0,) * d, (1.0,) * d)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lo_arr(self) -> np.ndarray:
        return np.array(self.lo)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.array(self.hi)

    @property
    def sides(self) -> np.ndarray:
        return self.hi_arr - self.lo_arr

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo_arr + self.hi_arr)

    def diameter(self) -> float:
        return float(math.sqrt(float(np.sum(self.sides**2))))

    def aspect_ratio(self) -> float:
        s = self.sides
        return float(s.max() / s.min())

    def longest_axis(self) -> int:
        # np.argmax returns the first maximum, i.e. the smallest index on ties
        return int(np.argmax(self.sides))

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.lo_arr - tol) & (p <= self.hi_arr + tol), axis=1)

    def intersect(self, other: Box) -> Box | None:
        lo = np.maximum(self.lo_arr, other.lo_arr)
        hi = np.minimum(self.hi_arr, other.hi_arr)
        if np.any(lo >= hi):
            return None
        return Box(tuple(lo), tuple(hi))

    def split(self, axis: int, t: float) -> tuple[Box, Box]:
        hi1 = list(self.hi)
        lo2 = list(self.lo)
        hi1[axis] = t
        lo2[axis] = t
        return Box(self.lo, tuple(hi1)), Box(tuple(lo2), self.hi)

    def farthest_distance(self, points: np.ndarray) -> np.ndarray:
        """Largest distance from each point to any point of the box."""
        p = np.atleast_2d(points)
        far = np.maximum(np.abs(p - self.lo_arr), np.abs(p - self.hi_arr))
        return np.sqrt(np.sum(far**2, axis=1))

    def to_json(self) -> list:
        return [list(self.lo), list(self.hi)]


def boxes_to_arrays(boxes: Sequence[Box]) -> tuple[np.ndarray, np.ndarray]:
    return np.array([b.lo for b in boxes]), np.array([b.hi for b in boxes])


def point_box_distance(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Euclidean distance from points to boxes, row by row (broadcasting)."""
    gap = np.maximum(np.maximum(lo - points, 0.0), points - hi)
    return np.sqrt(np.sum(gap * gap, axis=-1))


def point_box_farthest(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    far = np.maximum(np.abs(points - lo), np.abs(points - hi))
    return np.sqrt(np.sum(far * far, axis=-1))


def assign_to_boxes(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Index of the box holding each point, -1 when none does.

    A point on a shared face goes to the box whose lo corner is
    lexicographically smallest.
    """
    points = np.atleast_2d(points)
    order = np.lexsort(lo.T[::-1])
    out = np.full(len(points), -1, dtype=np.int64)
    for b in order:
        free = out < 0
        if not free.any():
            break
        inside = np.all((points[free] >= lo[b]) & (points[free] <= hi[b]), axis=1)
        idx = np.flatnonzero(free)[inside]
        out[idx] = b
    return out


def _facet_between(a: Box, b: Box, tol: float = 1e-12) -> tuple[int, float, Box] | None:
    """Shared facet of two interior-disjoint boxes: (axis, coordinate, facet box).

    The facet box is degenerate along ``axis``; it is returned with a zero
    thickness replaced by the coordinate on both ends, encoded via lo/hi of
    the tangential axes only (axis entry holds the coordinate twice).
    """
    d = a.dim
    for axis in range(d):
        for first, second in ((a, b), (b, a)):
            if abs(first.hi[axis] - second.lo[axis]) <= tol:
                lo = np.maximum(a.lo_arr, b.lo_arr)
                hi = np.minimum(a.hi_arr, b.hi_arr)
                tang = [i for i in range(d) if i != axis]
                if all(hi[i] - lo[i] > tol for i in tang):
                    coord = first.hi[axis]
                    flo = list(lo)
                    fhi = list(hi)
                    flo[axis] = coord
                    fhi[axis] = coord + 1.0  # placeholder thickness, see Facet
                    return axis, coord, Box(tuple(flo), tuple(fhi))
    return None


@dataclass(frozen=True)
class Facet:
    """Common (d-1)-face of two boxes: normal axis, coordinate, tangential extent."""

    axis: int
    coord: float
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def tangential_sides(self) -> np.ndarray:
        s = np.array(self.hi) - np.array(self.lo)
        return np.delete(s, self.axis)

    @property
    def centroid(self) -> np.ndarray:
        c = 0.5 * (np.array(self.lo) + np.array(self.hi))
        c[self.axis] = self.coord
        return c

    def measure(self) -> float:
        return float(np.prod(self.tangential_sides()))


def shared_facet(a: Box, b: Box, tol: float = 1e-12) -> Facet | None:
    hit = _facet_between(a, b, tol)
    if hit is None:
        return None
    axis, coord, fb = hit
    lo = list(fb.lo)
    hi = list(fb.hi)
    lo[axis] = coord
    hi[axis] = coord
    return Facet(axis, coord, tuple(lo), tuple(hi))


class BoxUnionDomain:
    """Union of interior-disjoint boxes, connected through shared facets."""

    def __init__(self, boxes: Iterable[Box], require_connected: bool = True):
        self.boxes: tuple[Box, ...] = tuple(boxes)
        if not self.boxes:
            raise DomainError("domain needs at least one box")
        d = self.boxes[0].dim
        if any(b.dim != d for b in self.boxes):
            raise DomainError("all boxes must share the dimension")
        for i, a in enumerate(self.boxes):
            for b in self.boxes[i + 1 :]:
                if a.intersect(b) is not None:
                    raise DomainError(f"boxes {a} and {b} overlap")
        self.dim = d
        self.adjacency: dict[int, list[int]] = {i: [] for i in range(len(self.boxes))}
        for i, a in enumerate(self.boxes):
            for j in range(i + 1, len(self.boxes)):
                if shared_facet(a, self.boxes[j]) is not None:
                    self.adjacency[i].append(j)
                    self.adjacency[j].append(i)
        if require_connected:
            comps = self.components()
            if len(comps) > 1:
                raise DomainError(f"domain is disconnected; components {comps}")

    @classmethod
    def single(cls, box: Box) -> BoxUnionDomain:
        return cls([box])

    @classmethod
    def unit(cls, d: int) -> BoxUnionDomain:
        return cls([Box.unit(d)])

    def components(self, subset: Iterable[int] | None = None) -> list[list[int]]:
        nodes = set(range(len(self.boxes)) if subset is None else subset)
        seen: set[int] = set()
        comps = []
        for start in sorted(nodes):
            if start in seen:
                continue
            comp = []
            queue = deque([start])
            seen.add(start)
            while queue:
                u = queue.popleft()
                comp.append(u)
                for v in self.adjacency[u]:
                    if v in nodes and v not in seen:
                        seen.add(v)
                        queue.append(v)
            comps.append(sorted(comp))
        return comps

    @property
    def volume(self) -> float:
        return sum(b.volume for b in self.boxes)

    def bounding_box(self) -> Box:
        lo, hi = boxes_to_arrays(self.boxes)
        return Box(tuple(lo.min(0)), tuple(hi.max(0)))

    def diameter(self) -> float:
        corners = []
        for b in self.boxes:
            for mask in range(2**self.dim):
                corners.append([b.hi[i] if mask >> i & 1 else b.lo[i] for i in range(self.dim)])
        c = np.array(corners)
        diff = c[:, None, :] - c[None, :, :]
        return float(np.sqrt((diff**2).sum(-1)).max())

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        inside = np.zeros(len(points), dtype=bool)
        for b in self.boxes:
            inside |= b.contains(points)
        return inside

    def box_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return boxes_to_arrays(self.boxes)

    def to_json(self) -> dict:
        return {"boxes": [b.to_json() for b in self.boxes]}


# --------------------------------------------------------------------------
# Piecewise-constant fields


def _overlaps(edges: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """(N, g) overlap lengths of intervals [lo, hi] with the g grid cells."""
    left = np.maximum(lo[:, None], edges[None, :-1])
    right = np.minimum(hi[:, None], edges[None, 1:])
    return np.clip(right - left, 0.0, None)


def _contract(values: np.ndarray, overlaps: Sequence[np.ndarray], keep: int | None = None) -> np.ndarray:
    """sum_{i} V[i0..id-1] * prod_j O_j[n, i_j], optionally keeping one axis."""
    d = values.ndim
    letters = _ALPHABET[:d]
    operands = [values]
    subs = [letters]
    for j in range(d):
        if j == keep:
            continue
        operands.append(overlaps[j])
        subs.append("z" + letters[j])
    out = "z" + (letters[keep] if keep is not None else "")
    return np.einsum(",".join(subs) + "->" + out, *operands, optimize=True)


class Field:
    """Nonnegative piecewise-constant function on a rectilinear grid."""

    def __init__(self, edges: Sequence[np.ndarray], values: np.ndarray):
        self.edges = tuple(np.asarray(e, dtype=float) for e in edges)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != tuple(len(e) - 1 for e in self.edges):
            raise DensityError("values shape does not match edges")
        if any(np.any(np.diff(e) <= 0) for e in self.edges):
            raise DensityError("edges must be strictly increasing")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise DensityError("field values must be finite and nonnegative")

    @classmethod
    def constant(cls, box: Box, value: float) -> Field:
        edges = [np.array([a, b]) for a, b in zip(box.lo, box.hi)]
        return cls(edges, np.full((1,) * box.dim, float(value)))

    @property
    def dim(self) -> int:
        return len(self.edges)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def support_box(self) -> Box:
        return Box(tuple(e[0] for e in self.edges), tuple(e[-1] for e in self.edges))

    def cell_volumes(self) -> np.ndarray:
        vol = np.ones(())
        for e in self.edges:
            vol = np.multiply.outer(vol, np.diff(e))
        return vol

    def total(self) -> float:
        return float(np.sum(self.values * self.cell_volumes()))

    def positive_min(self) -> float:
        v = self.values[self.values > 0]
        return float(v.min()) if v.size else 0.0

    def max(self) -> float:
        return float(self.values.max())

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, ...]:
        points = np.atleast_2d(points)
        idx = []
        for j, e in enumerate(self.edges):
            i = np.searchsorted(e, points[:, j], side="left") - 1
            idx.append(np.clip(i, 0, len(e) - 2))
        return tuple(idx)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        out = self.values[self.locate(points)]
        outside = np.zeros(len(points), dtype=bool)
        for j, e in enumerate(self.edges):
            outside |= (points[:, j] < e[0]) | (points[:, j] > e[-1])
        out[outside] = 0.0
        return out

    def mass(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Exact integral over each box [lo[n], hi[n]]."""
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        out = np.empty(len(lo))
        step = max(1, 2_000_000 // max(1, self.values.size))
        for a in range(0, len(lo), step):
            ov = [_overlaps(e, lo[a : a + step, j], hi[a : a + step, j]) for j, e in enumerate(self.edges)]
            out[a : a + step] = _contract(self.values, ov)
        return out

    def mass_of_box(self, box: Box) -> float:
        return float(self.mass(box.lo_arr[None], box.hi_arr[None])[0])

    def split_position(self, lo: np.ndarray, hi: np.ndarray, axis: np.ndarray, frac: np.ndarray) -> np.ndarray:
        """Coordinate t along ``axis`` with mass([lo, t]) = frac * mass([lo, hi]).

        The mass profile along the axis is piecewise linear with kinks at the
        grid edges, so the position is obtained by exact inversion.
        """
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        axis = np.broadcast_to(np.asarray(axis), (len(lo),))
        frac = np.broadcast_to(np.asarray(frac, dtype=float), (len(lo),))
        t = np.empty(len(lo))
        for a in range(self.dim):
            sel = np.flatnonzero(axis == a)
            if sel.size == 0:
                continue
            step = max(1, 2_000_000 // max(1, self.values.size))
            for s0 in range(0, sel.size, step):
                s = sel[s0 : s0 + step]
                ov = [_overlaps(e, lo[s, j], hi[s, j]) for j, e in enumerate(self.edges)]
                dens = _contract(self.values, ov, keep=a)  # per unit length on each slab
                # overlaps along a were not used: mass per slab is density * clipped length
                seg = ov[a]
                seg_mass = dens * seg
                cum = np.concatenate([np.zeros((len(s), 1)), np.cumsum(seg_mass, axis=1)], axis=1)
                target = frac[s] * cum[:, -1]
                j = np.sum(cum[:, 1:] < target[:, None], axis=1)
                j = np.minimum(j, seg.shape[1] - 1)
                rows = np.arange(len(s))
                start = np.maximum(self.edges[a][j], lo[s, a])
                rate = dens[rows, j]
                with np.errstate(divide="ignore", invalid="ignore"):
                    dt = np.where(rate > 0, (target - cum[rows, j]) / rate, 0.0)
                t[s] = np.clip(start + np.clip(dt, 0.0, None), lo[s, a], hi[s, a])
        return t

    def is_constant_on(self, lo: np.ndarray, hi: np.ndarray, rtol: float = 0.0) -> np.ndarray:
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        first = []
        last = []
        for j, e in enumerate(self.edges):
            i0 = np.searchsorted(e, lo[:, j], side="right") - 1
            i1 = np.searchsorted(e, hi[:, j], side="left") - 1
            first.append(np.clip(i0, 0, len(e) - 2))
            last.append(np.clip(i1, 0, len(e) - 2))
        single = np.all([f == l for f, l in zip(first, last)], axis=0)
        out = single.copy()
        for n in np.flatnonzero(~single):
            block = self.values[tuple(slice(f[n], l[n] + 1) for f, l in zip(first, last))]
            out[n] = np.ptp(block) <= rtol * max(block.max(), 1e-300)
        return out

    def restrict(self, box: Box) -> Field:
        edges = []
        sl = []
        for j, e in enumerate(self.edges):
            a, b = box.lo[j], box.hi[j]
            if a < e[0] - 1e-12 or b > e[-1] + 1e-12:
                raise DensityError(f"box {box} leaves the field support")
            inner = e[(e > a) & (e < b)]
            new = np.concatenate([[a], inner, [b]])
            i0 = int(np.searchsorted(e, a, side="right") - 1)
            i0 = min(max(i0, 0), len(e) - 2)
            edges.append(new)
            sl.append(slice(i0, i0 + len(new) - 1))
        return Field(edges, self.values[tuple(sl)].copy())

    def refine(self, extra: Sequence[Iterable[float]]) -> Field:
        edges = []
        for e, x in zip(self.edges, extra):
            x = np.asarray(list(x), dtype=float)
            x = x[(x > e[0]) & (x < e[-1])]
            merged = np.unique(np.concatenate([e, x]))
            keep = np.concatenate([[True], np.diff(merged) > 1e-14 * max(1.0, abs(merged).max())])
            edges.append(merged[keep])
        centers = [0.5 * (e[1:] + e[:-1]) for e in edges]
        idx = [np.clip(np.searchsorted(old, c) - 1, 0, len(old) - 2) for old, c in zip(self.edges, centers)]
        values = self.values[np.ix_(*idx)]
        return Field(edges, values)

    def scaled(self, factor: float) -> Field:
        return Field(self.edges, self.values * factor)

    def map_cells(self, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Field:
        """New field with values fn(old_values, cell_centers)."""
        centers = np.stack(np.meshgrid(*[0.5 * (e[1:] + e[:-1]) for e in self.edges], indexing="ij"), axis=-1)
        return Field(self.edges, fn(self.values, centers))

    def cells(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All cells with positive value as (lo, hi, value) arrays."""
        grids_lo = np.meshgrid(*[e[:-1] for e in self.edges], indexing="ij")
        grids_hi = np.meshgrid(*[e[1:] for e in self.edges], indexing="ij")
        lo = np.stack([g.ravel() for g in grids_lo], axis=1)
        hi = np.stack([g.ravel() for g in grids_hi], axis=1)
        v = self.values.ravel()
        keep = v > 0
        return lo[keep], hi[keep], v[keep]

    def sup_distance(self, other: Field) -> float:
        """Sup norm of the difference of two fields on a common support."""
        a = self.refine(other.edges)
        b = other.refine(self.edges)
        return float(np.abs(a.values - b.values).max())


def combine_fields(a: Field, b: Field) -> tuple[Field, Field]:
    """Both fields on the common refinement of their grids."""
    return a.refine(b.edges), b.refine(a.edges)


# --------------------------------------------------------------------------
# Densities


def _gauss_legendre_box(fn, box: Box, level: int, order: int = 6) -> float:
    nodes, weights = np.polynomial.legendre.leggauss(order)
    m = 2**level
    pts_axes = []
    w_axes = []
    for a, b in zip(box.lo, box.hi):
        h = (b - a) / m
        left = a + h * np.arange(m)
        x = (left[:, None] + 0.5 * h * (nodes[None, :] + 1)).ravel()
        w = np.tile(0.5 * h * weights, m)
        pts_axes.append(x)
        w_axes.append(w)
    grids = np.meshgrid(*pts_axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wt = np.ones(())
    for w in w_axes:
        wt = np.multiply.outer(wt, w)
    return float(np.sum(fn(pts) * wt.ravel()))


@dataclass(frozen=True)
class AnalyticPreset:
    name: str
    amplitude: float
    center: tuple[float, ...] | None = None
    width: float = 0.2


def _preset_raw(preset: AnalyticPreset, domain: BoxUnionDomain, lam: float) -> Callable[[np.ndarray], np.ndarray]:
    lo, hi = domain.box_arrays()

    def raw(points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        idx = assign_to_boxes(points, lo, hi)
        out = np.zeros(len(points))
        ok = idx >= 0
        p = points[ok]
        if preset.name == "sine":
            u = (p - lo[idx[ok]]) / (hi[idx[ok]] - lo[idx[ok]])
            out[ok] = 1.0 + preset.amplitude * np.prod(np.sin(2 * np.pi * u), axis=1)
        elif preset.name == "bump":
            c = np.array(preset.center) if preset.center is not None else domain.bounding_box().center
            r2 = np.sum((p - c) ** 2, axis=1)
            out[ok] = np.clip(1.0 + preset.amplitude * np.exp(-r2 / (2 * preset.width**2)), 1.0 / lam, lam)
        else:
            raise DensityError(f"unknown preset {preset.name!r}")
        return out

    return raw


class Density:
    """Probability density (times an optional mass multiplier) on a box union.

    ``kind`` is ``uniform``, ``grid`` or ``analytic``. The first two are held
    as an exact :class:`Field`; analytic presets are evaluated pointwise and
    integrated by quadrature.
    """

    def __init__(
        self,
        domain: BoxUnionDomain,
        kind: str,
        lam: float,
        field: Field | None = None,
        func: Callable[[np.ndarray], np.ndarray] | None = None,
        scale: float = 1.0,
        preset: AnalyticPreset | None = None,
    ):
        if lam < 1:
            raise DensityError("lambda must be >= 1")
        self.domain = domain
        self.kind = kind
        self.lam = float(lam)
        self.field = field
        self.func = func
        self.scale = float(scale)
        self.preset = preset

    # constructors --------------------------------------------------------
    @classmethod
    def uniform(cls, domain: BoxUnionDomain | Box, lam: float | None = None) -> Density:
        if isinstance(domain, Box):
            domain = BoxUnionDomain.single(domain)
        value = 1.0 / domain.volume
        lam = max(value, 1.0 / value) if lam is None else lam
        return cls._from_cell_values(domain, "uniform", lam, None, None)

    @classmethod
    def from_grid(
        cls,
        domain: BoxUnionDomain | Box,
        values: np.ndarray,
        lam: float,
        grid_box: Box | None = None,
        grid_edges: Sequence[np.ndarray] | None = None,
    ) -> Density:
        """Piecewise-constant density from a value grid over ``grid_box``.

        Values are normalized so that the total mass is 1; the normalized
        values must lie in [1/lam, lam] on the domain.
        """
        if isinstance(domain, Box):
            domain = BoxUnionDomain.single(domain)
        values = np.asarray(values, dtype=float)
        if grid_edges is None:
            gb = grid_box or domain.bounding_box()
            grid_edges = [np.linspace(a, b, n + 1) for a, b, n in zip(gb.lo, gb.hi, values.shape)]
        return cls._from_cell_values(domain, "grid", lam, values, list(grid_edges))

    @classmethod
    def _from_cell_values(cls, domain, kind, lam, values, grid_edges) -> Density:
        lo, hi = domain.box_arrays()
        edges = []
        for j in range(domain.dim):
            pts = np.concatenate([lo[:, j], hi[:, j]] + ([grid_edges[j]] if grid_edges is not None else []))
            bb_lo, bb_hi = lo[:, j].min(), hi[:, j].max()
            pts = pts[(pts >= bb_lo) & (pts <= bb_hi)]
            edges.append(np.unique(pts))
        centers = np.stack(np.meshgrid(*[0.5 * (e[1:] + e[:-1]) for e in edges], indexing="ij"), axis=-1)
        flat = centers.reshape(-1, domain.dim)
        inside = domain.contains(flat)
        if values is None:
            cell = np.ones(len(flat))
        else:
            idx = tuple(
                np.clip(np.searchsorted(ge, flat[:, j]) - 1, 0, len(ge) - 2) for j, ge in enumerate(grid_edges)
            )
            cell = values[idx]
        cell = np.where(inside, cell, 0.0)
        if np.any(cell[inside] <= 0):
            raise DensityError("density values must be positive on the domain")
        f = Field(edges, cell.reshape(centers.shape[:-1]))
        total = f.total()
        f = f.scaled(1.0 / total)
        vals = f.values.ravel()[inside]
        rtol = 1e-12
        if vals.min() < (1.0 / lam) * (1 - rtol) or vals.max() > lam * (1 + rtol):
            raise DensityError(
                f"normalized values span [{vals.min():.6g}, {vals.max():.6g}], outside [1/lambda, lambda] "
                f"with lambda={lam}"
            )
        return cls(domain, kind, lam, field=f)

    @classmethod
    def analytic(cls, domain: BoxUnionDomain | Box, preset: AnalyticPreset, lam: float) -> Density:
        if isinstance(domain, Box):
            domain = BoxUnionDomain.single(domain)
        raw = _preset_raw(preset, domain, lam)
        total = sum(_quadrature(raw, b) for b in domain.boxes)

        def func(points: np.ndarray) -> np.ndarray:
            return raw(points) / total

        dens = cls(domain, "analytic", lam, func=func, preset=preset)
        probe = _probe_grid(domain, 33)
        vals = func(probe)
        if vals.min() < 1.0 / lam * (1 - 1e-9) or vals.max() > lam * (1 + 1e-9):
            raise DensityError("analytic preset violates the lambda bound")
        return dens

    # queries ---------------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def is_piecewise(self) -> bool:
        return self.field is not None

    def require_field(self) -> Field:
        if self.field is None:
            raise DensityError("this scheme needs a piecewise-constant density (uniform or grid kind)")
        return self.field.scaled(self.scale) if self.scale != 1.0 else self.field

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        if self.field is not None:
            return self.scale * self.field.evaluate(points)
        return self.scale * self.func(points)

    def total_mass(self) -> float:
        return self.scale

    def mass(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        if self.field is not None:
            return self.scale * self.field.mass(lo, hi)
        out = np.zeros(len(lo))
        for n in range(len(lo)):
            out[n] = measure_of_box(self, Box(tuple(lo[n]), tuple(hi[n])))
        return out

    def scaled(self, factor: float) -> Density:
        return Density(self.domain, self.kind, self.lam, self.field, self.func, self.scale * factor, self.preset)

    def to_config(self) -> dict:
        cfg = {"domain": [b.to_json() for b in self.domain.boxes], "kind": self.kind, "lambda": self.lam}
        if self.kind == "grid":
            cfg["edges"] = [e.tolist() for e in self.field.edges]
            cfg["values"] = self.field.values.tolist()
        if self.kind == "analytic":
            cfg["preset"] = {"name": self.preset.name, "amplitude": self.preset.amplitude}
        return cfg


def _probe_grid(domain: BoxUnionDomain, m: int) -> np.ndarray:
    pts = []
    for b in domain.boxes:
        axes = [np.linspace(a, c, m) for a, c in zip(b.lo, b.hi)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.dim)
        pts.append(g)
    return np.concatenate(pts)


def _quadrature(fn, box: Box, rtol: float = 1e-10, max_level: int | None = None) -> float:
    if max_level is None:
        max_level = {1: 14, 2: 7, 3: 4}.get(box.dim, 3)
    prev = _gauss_legendre_box(fn, box, 0)
    for level in range(1, max_level + 1):
        cur = _gauss_legendre_box(fn, box, level)
        if abs(cur - prev) <= rtol * max(abs(cur), 1e-300):
            return cur
        prev = cur
    return prev


def measure_of_box(density: Density, box: Box) -> float:
    """Integral of the density over ``box`` intersected with the domain."""
    if density.field is not None:
        return density.scale * density.field.mass_of_box(box)
    total = 0.0
    for b in density.domain.boxes:
        inter = b.intersect(box)
        if inter is not None:
            total += _quadrature(density.func, inter)
    return density.scale * total


def density_from_config(cfg: dict | str | Path) -> Density:
    """Build a density from the JSON config document.

    ``{"domain": [[lo, hi], ...], "kind": "uniform" | "grid" | "analytic",
    "lambda": float, "values": nested list, "grid": [lo, hi] (optional),
    "preset": {...}}``
    """
    if not isinstance(cfg, dict):
        cfg = json.loads(Path(cfg).read_text())
    try:
        boxes = [Box(tuple(lo), tuple(hi)) for lo, hi in cfg["domain"]]
        kind = cfg.get("kind", "uniform")
        lam = float(cfg.get("lambda", 1.0))
    except (KeyError, TypeError) as exc:
        raise DensityError(f"malformed density config: {exc}") from exc
    domain = BoxUnionDomain(boxes)
    if kind == "uniform":
        return Density.uniform(domain, lam=max(lam, 1.0 / domain.volume, domain.volume))
    if kind == "grid":
        values = np.asarray(cfg["values"], dtype=float)
        if "edges" in cfg:
            return Density.from_grid(domain, values, lam, grid_edges=[np.asarray(e) for e in cfg["edges"]])
        grid_box = Box(*cfg["grid"]) if "grid" in cfg else None
        return Density.from_grid(domain, values, lam, grid_box=grid_box)
    if kind == "analytic":
        p = cfg["preset"]
        preset = AnalyticPreset(p["name"], float(p.get("amplitude", 0.5)), tuple(p["center"]) if "center" in p else None)
        return Density.analytic(domain, preset, lam)
    raise DensityError(f"unknown density kind {kind!r}")


def random_grid_density(rng: np.random.Generator, lam: float, shape: Sequence[int], box: Box | None = None) -> Density:
    """Random piecewise-constant density whose normalized values fit [1/lam, lam]."""
    box = box or Box.unit(len(shape))
    if lam == 1.0:
        return Density.from_grid(box, np.ones(shape), 1.0)
    raw = np.exp(rng.uniform(-math.log(lam), math.log(lam), size=shape))
    vol = box.volume
    w = raw / raw.mean()  # mean one; normalized density is w / vol
    # shrink toward the mean until all normalized values fit the band
    lo_lim, hi_lim = vol / lam, vol * lam
    s = 1.0
    if w.max() > hi_lim:
        s = min(s, (hi_lim - 1) / (w.max() - 1))
    if w.min() < lo_lim:
        s = min(s, (1 - lo_lim) / (1 - w.min()))
    w = 1.0 + s * (w - 1.0)
    return Density.from_grid(box, w, lam)


# --------------------------------------------------------------------------
# Empirical measures


@dataclass(frozen=True)
class EmpiricalMeasure:
    points: np.ndarray
    seed: int
    sampler_id: str = SAMPLER_ID

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(pts) < 1:
            raise ValueError("an empirical measure needs at least one point")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def weight(self) -> float:
        return 1.0 / self.n

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mass(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        out = np.empty(len(lo))
        for k in range(len(lo)):
            inside = np.all((self.points >= lo[k]) & (self.points <= hi[k]), axis=1)
            out[k] = inside.sum() / self.n
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i}" for i in range(self.dim)])
            for p in self.points:
                w.writerow([repr(float(v)) for v in p])

    @classmethod
    def from_csv(cls, path: str | Path, seed: int = -1, sampler_id: str = "csv") -> EmpiricalMeasure:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls(np.array(rows[1:], dtype=float), seed, sampler_id)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def sample(density: Density, n: int, seed: int) -> EmpiricalMeasure:
    """i.i.d. sample by rejection from volume-weighted uniform proposals."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    domain = density.domain
    lo, hi = domain.box_arrays()
    vols = np.prod(hi - lo, axis=1)
    p = vols / vols.sum()
    ceiling = density.lam / density.scale if density.scale != 1.0 else density.lam
    out = []
    have = 0
    while have < n:
        m = max(1024, int(1.2 * (n - have) * density.lam**2))
        which = rng.choice(len(vols), size=m, p=p)
        u = rng.random((m, domain.dim))
        pts = lo[which] + u * (hi[which] - lo[which])
        accept = rng.random(m) * ceiling < density.evaluate(pts) / density.scale
        pts = pts[accept]
        out.append(pts)
        have += len(pts)
    pts = np.concatenate(out)[:n]
    return EmpiricalMeasure(pts, int(seed), SAMPLER_ID)


# --------------------------------------------------------------------------
# Mass bookkeeping


@dataclass
class MassLedger:
    """Probe-box masses of a pushed-forward source against a target."""

    entries: dict[int, tuple[float, float]] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)
    method: str = "exact"

    def record(self, key: int, mass_in: float, mass_out: float) -> None:
        if mass_in < -1e-12 or mass_out < -1e-12:
            raise ValueError("ledger entries must be nonnegative")
        self.entries[key] = (max(mass_in, 0.0), max(mass_out, 0.0))

    @property
    def total_in(self) -> float:
        return sum(v[0] for v in self.entries.values())

    @property
    def total_out(self) -> float:
        return sum(v[1] for v in self.entries.values())

    def max_abs_error(self) -> float:
        if not self.entries:
            return 0.0
        return max(abs(a - b) for a, b in self.entries.values())

    def max_rel_error(self) -> float:
        errs = [abs(a - b) / max(b, 1e-300) for a, b in self.entries.values() if b > 0]
        zero = [a for a, b in self.entries.values() if b <= 0]
        return max(errs + [float("inf") if any(z > 1e-15 for z in zero) else 0.0])

    def balanced(self, atol: float = 1e-9) -> bool:
        return not self.flagged and self.max_abs_error() <= atol


@dataclass
class WeightedBoxes:
    """Measure given as constant densities on a list of boxes (may overlap)."""

    lo: np.ndarray
    hi: np.ndarray
    dens: np.ndarray

    @classmethod
    def empty(cls, d: int) -> WeightedBoxes:
        return cls(np.zeros((0, d)), np.zeros((0, d)), np.zeros(0))

    @classmethod
    def from_field(cls, f: Field) -> WeightedBoxes:
        return cls(*f.cells())

    @classmethod
    def concat(cls, parts: Sequence[WeightedBoxes]) -> WeightedBoxes:
        parts = [p for p in parts if len(p.dens)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(
            np.concatenate([p.lo for p in parts]),
            np.concatenate([p.hi for p in parts]),
            np.concatenate([p.dens for p in parts]),
        )

    def __len__(self) -> int:
        return len(self.dens)

    def select(self, mask: np.ndarray) -> WeightedBoxes:
        return WeightedBoxes(self.lo[mask], self.hi[mask], self.dens[mask])

    def total(self) -> float:
        return float(np.sum(self.dens * np.prod(self.hi - self.lo, axis=1)))

    def mass(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        out = np.empty(len(lo))
        for k in range(len(lo)):
            ov = np.clip(np.minimum(self.hi, hi[k]) - np.maximum(self.lo, lo[k]), 0.0, None)
            out[k] = float(np.sum(self.dens * np.prod(ov, axis=1)))
        return out

    def clip_to(self, lo: np.ndarray, hi: np.ndarray) -> WeightedBoxes:
        nlo = np.maximum(self.lo, lo)
        nhi = np.minimum(self.hi, hi)
        keep = np.all(nhi > nlo, axis=1)
        return WeightedBoxes(nlo[keep], nhi[keep], self.dens[keep])


@dataclass
class Atoms:
    points: np.ndarray
    masses: np.ndarray

    def mass(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        out = np.empty(len(lo))
        for k in range(len(lo)):
            inside = np.all((self.points >= lo[k]) & (self.points <= hi[k]), axis=1)
            out[k] = float(self.masses[inside].sum())
        return out


@dataclass
class PushedMeasure:
    """Exact image of a measure: an absolutely continuous part plus atoms."""

    boxes: WeightedBoxes | None = None
    atoms: Atoms | None = None

    def mass(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        lo = np.atleast_2d(lo)
        out = np.zeros(len(lo))
        if self.boxes is not None and len(self.boxes):
            out += self.boxes.mass(lo, hi)
        if self.atoms is not None and len(self.atoms.masses):
            out += self.atoms.mass(lo, hi)
        return out

    def total(self) -> float:
        t = 0.0
        if self.boxes is not None:
            t += self.boxes.total()
        if self.atoms is not None:
            t += float(self.atoms.masses.sum())
        return t


def _source_boxes(density: Density) -> WeightedBoxes:
    return WeightedBoxes.from_field(density.require_field())


def pushforward_check(
    transport,
    density: Density,
    target: Density | EmpiricalMeasure,
    probe_boxes: Sequence[Box],
    n_mc: int = 200_000,
    seed: int = 0,
) -> MassLedger:
    """Compare T#density with target on probe boxes.

    ``transport`` is either an object with an exact ``pushforward`` method
    taking :class:`WeightedBoxes`, or a plain point map, in which case the
    image mass is a Monte Carlo estimate from ``n_mc`` density samples.
    Probe masses of atoms use closed boxes; a probe list that tiles the
    domain should hand shared-face atoms to the lexicographically first box,
    which is done here by visiting probes in lexicographic order of ``lo``.
    """
    ledger = MassLedger()
    lo, hi = boxes_to_arrays(probe_boxes)
    if hasattr(transport, "pushforward") and density.is_piecewise:
        image = transport.pushforward(_source_boxes(density))
        ledger.method = "exact"
        mass_in = _probe_masses(image, lo, hi)
    else:
        ledger.method = "monte-carlo"
        emp = sample(density, n_mc, seed)
        mapped = np.atleast_2d(np.asarray([transport(p) for p in emp.points]) if not _is_vectorized(transport) else transport(emp.points))
        outside = ~density.domain.contains(mapped)
        if outside.any():
            ledger.flagged.append(f"{int(outside.sum())} mapped points left the domain")
        mass_in = _probe_masses(PushedMeasure(atoms=Atoms(mapped, np.full(len(mapped), density.total_mass() / n_mc))), lo, hi)
    if isinstance(target, EmpiricalMeasure):
        mass_out = _probe_masses(PushedMeasure(atoms=Atoms(target.points, np.full(target.n, target.weight))), lo, hi)
    else:
        mass_out = target.mass(lo, hi)
    for k in range(len(lo)):
        ledger.record(k, float(mass_in[k]), float(mass_out[k]))
    return ledger


def _is_vectorized(fn) -> bool:
    return getattr(fn, "vectorized", False) or hasattr(fn, "evaluate")


def _probe_masses(image: PushedMeasure, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    out = np.zeros(len(lo))
    if image.boxes is not None and len(image.boxes):
        out += image.boxes.mass(lo, hi)
    if image.atoms is not None and len(image.atoms.masses):
        owner = assign_to_boxes(image.atoms.points, lo, hi)
        ok = owner >= 0
        np.add.at(out, owner[ok], image.atoms.masses[ok])
    return out


def grid_probes(box: Box, per_axis: int) -> list[Box]:
    axes = [np.linspace(a, b, per_axis + 1) for a, b in zip(box.lo, box.hi)]
    out = []
    for idx in np.ndindex(*(per_axis,) * box.dim):
        out.append(Box(tuple(axes[j][i] for j, i in enumerate(idx)), tuple(axes[j][i + 1] for j, i in enumerate(idx))))
    return out


def box_overlaps(alo: np.ndarray, ahi: np.ndarray, blo: np.ndarray, bhi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All pairs (i, j) of boxes A_i, B_j whose intersection has positive volume.

    B is bucketed on a uniform grid sized to its typical box; each A box is
    checked against the buckets it touches.
    """
    alo = np.atleast_2d(alo)
    ahi = np.atleast_2d(ahi)
    blo = np.atleast_2d(blo)
    bhi = np.atleast_2d(bhi)
    if len(alo) == 0 or len(blo) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    d = alo.shape[1]
    origin = np.minimum(alo.min(0), blo.min(0))
    span = np.maximum(ahi.max(0), bhi.max(0)) - origin
    s = np.maximum(np.median(bhi - blo, axis=0), span / 1024)
    dims = np.floor(span / s).astype(np.int64) + 1
    mult = np.cumprod(np.concatenate([[1], dims[:-1]]))

    def cell_range(lo, hi):
        c0 = np.clip(np.floor((lo - origin) / s).astype(np.int64), 0, dims - 1)
        c1 = np.clip(np.floor((hi - origin) / s).astype(np.int64), 0, dims - 1)
        return c0, c1

    def expand(c0, c1):
        counts = np.prod(c1 - c0 + 1, axis=1)
        owner = np.repeat(np.arange(len(c0)), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        ext = (c1 - c0 + 1)[owner]
        keys = np.zeros(len(owner), dtype=np.int64)
        rem = local.copy()
        for j in range(d):
            keys += (c0[owner, j] + rem % ext[:, j]) * mult[j]
            rem //= ext[:, j]
        return owner, keys

    bo, bk = expand(*cell_range(blo, bhi))
    order = np.argsort(bk, kind="stable")
    bk = bk[order]
    bo = bo[order]
    ia_all, ib_all = [], []
    c0, c1 = cell_range(alo, ahi)
    counts = np.prod(c1 - c0 + 1, axis=1)
    step = max(1, 4_000_000 // max(1, int(counts.max())))
    for a0 in range(0, len(alo), step):
        ao, ak = expand(c0[a0 : a0 + step], c1[a0 : a0 + step])
        ao = ao + a0
        left = np.searchsorted(bk, ak, side="left")
        right = np.searchsorted(bk, ak, side="right")
        cnt = right - left
        tot = int(cnt.sum())
        if tot == 0:
            continue
        ia = np.repeat(ao, cnt)
        start = np.repeat(left - (np.cumsum(cnt) - cnt), cnt)
        ib = bo[start + np.arange(tot)]
        ok = np.all((np.minimum(ahi[ia], bhi[ib]) - np.maximum(alo[ia], blo[ib])) > 0, axis=1)
        ia_all.append(ia[ok])
        ib_all.append(ib[ok])
    if not ia_all:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    ia = np.concatenate(ia_all)
    ib = np.concatenate(ib_all)
    key = np.unique(ia * len(blo) + ib)
    return key // len(blo), key % len(blo)


def intersect_boxes(wb: WeightedBoxes, lo: np.ndarray, hi: np.ndarray) -> tuple[WeightedBoxes, np.ndarray]:
    """Pieces of ``wb`` inside each of the (disjoint) boxes, with the box index."""
    ia, ib = box_overlaps(wb.lo, wb.hi, lo, hi)
    nlo = np.maximum(wb.lo[ia], lo[ib])
    nhi = np.minimum(wb.hi[ia], hi[ib])
    return WeightedBoxes(nlo, nhi, wb.dens[ia]), ib


def subtract_box(outer: Box, inner: Box) -> list[Box]:
    """Boxes tiling ``outer`` minus ``inner`` (at most 2d of them)."""
    cut = outer.intersect(inner)
    if cut is None:
        return [outer]
    pieces = []
    lo = list(outer.lo)
    hi = list(outer.hi)
    for axis in range(outer.dim):
        if lo[axis] < cut.lo[axis]:
            h = hi.copy()
            h[axis] = cut.lo[axis]
            pieces.append(Box(tuple(lo), tuple(h)))
            lo[axis] = cut.lo[axis]
        if hi[axis] > cut.hi[axis]:
            l = lo.copy()
            l[axis] = cut.hi[axis]
            pieces.append(Box(tuple(l), tuple(hi)))
            hi[axis] = cut.hi[axis]
    return pieces


def _lex_rank(lo: np.ndarray) -> np.ndarray:
    order = np.lexsort(lo.T[::-1])
    rank = np.empty(len(lo), dtype=np.int64)
    rank[order] = np.arange(len(lo))
    return rank


def locate_in_boxes(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Same contract as :func:`assign_to_boxes`, bucketed for many boxes."""
    points = np.atleast_2d(points)
    if len(lo) <= 8:
        return assign_to_boxes(points, lo, hi)
    d = points.shape[1]
    origin = np.minimum(points.min(0), lo.min(0))
    span = np.maximum(points.max(0), hi.max(0)) - origin
    s = np.maximum(np.median(hi - lo, axis=0), span / 1024)
    s = np.where(s > 0, s, 1.0)
    dims = np.floor(span / s).astype(np.int64) + 1
    mult = np.cumprod(np.concatenate([[1], dims[:-1]]))
    c0 = np.clip(np.floor((lo - origin) / s).astype(np.int64), 0, dims - 1)
    c1 = np.clip(np.floor((hi - origin) / s).astype(np.int64), 0, dims - 1)
    counts = np.prod(c1 - c0 + 1, axis=1)
    owner = np.repeat(np.arange(len(lo)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    ext = (c1 - c0 + 1)[owner]
    keys = np.zeros(len(owner), dtype=np.int64)
    rem = local.copy()
    for j in range(d):
        keys += (c0[owner, j] + rem % ext[:, j]) * mult[j]
        rem //= ext[:, j]
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    owner = owner[order]
    pc = np.clip(np.floor((points - origin) / s).astype(np.int64), 0, dims - 1)
    pk = pc @ mult
    left = np.searchsorted(keys, pk, side="left")
    right = np.searchsorted(keys, pk, side="right")
    cnt = right - left
    ip = np.repeat(np.arange(len(points)), cnt)
    ib = owner[np.repeat(left - (np.cumsum(cnt) - cnt), cnt) + np.arange(cnt.sum())]
    inside = np.all((points[ip] >= lo[ib]) & (points[ip] <= hi[ib]), axis=1)
    ip, ib = ip[inside], ib[inside]
    rank = _lex_rank(lo)
    best = np.full(len(points), np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(best, ip, rank[ib])
    out = np.full(len(points), -1, dtype=np.int64)
    found = best < np.iinfo(np.int64).max
    inv = np.empty(len(lo), dtype=np.int64)
    inv[rank] = np.arange(len(lo))
    out[found] = inv[best[found]]
    return out


def value_count(field: Field, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Number of distinct field values met with positive volume by each box."""
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    vals = np.unique(field.values)
    out = np.zeros(len(lo), dtype=np.int64)
    step = max(1, 2_000_000 // max(1, field.values.size))
    for a in range(0, len(lo), step):
        ov = [(_overlaps(e, lo[a : a + step, j], hi[a : a + step, j]) > 0).astype(float) for j, e in enumerate(field.edges)]
        for v in vals:
            hit = _contract((field.values == v).astype(float), ov)
            out[a : a + step] += hit > 0
    return out


def is_constant_on(field: Field, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return value_count(field, lo, hi) <= 1


def times_field(wb: WeightedBoxes, field: Field) -> WeightedBoxes:
    """The measure wb multiplied by a piecewise-constant function."""
    glo = np.stack(np.meshgrid(*[e[:-1] for e in field.edges], indexing="ij"), -1).reshape(-1, field.dim)
    ghi = np.stack(np.meshgrid(*[e[1:] for e in field.edges], indexing="ij"), -1).reshape(-1, field.dim)
    parts, cell = intersect_boxes(wb, glo, ghi)
    dens = parts.dens * field.values.ravel()[cell]
    keep = dens > 0
    return WeightedBoxes(parts.lo[keep], parts.hi[keep], dens[keep])


def field_combine(a: Field, b: Field, fn) -> Field:
    """Pointwise fn(a, b) on the common refinement of both grids."""
    ra, rb = combine_fields(a, b)
    return Field(ra.edges, fn(ra.values, rb.values))
