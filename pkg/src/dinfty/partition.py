"""Dyadic box partitions: Lebesgue bisection, measure bisection and the
equal-mass rectangle partition used by the planar matching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import Box, Density, Field

ASPECT_RTOL = 1e-12
MAX_DEPTH = 40


class PartitionError(RuntimeError):
    pass


def _as_field(density: Density | Field) -> tuple[Field, float]:
    if isinstance(density, Field):
        return density, math.inf
    return density.require_field(), density.lam


def _longest_axis(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # argmax picks the smallest index among ties
    return np.argmax(hi - lo, axis=1)


@dataclass
class PartitionTree:
    """Binary tree of boxes stored level by level in flat arrays.

    Node ``i`` has box ``[lo[i], hi[i]]``; ``left[i]``/``right[i]`` are child
    indices or -1, ``axis[i]``/``pos[i]`` describe its split.
    """

    lo: np.ndarray
    hi: np.ndarray
    level: np.ndarray
    nu_mass: np.ndarray
    left: np.ndarray
    right: np.ndarray
    axis: np.ndarray
    pos: np.ndarray
    mode: str

    @property
    def root(self) -> PartitionNode:
        return PartitionNode(self, 0)

    @property
    def depth(self) -> int:
        return int(self.level.max())

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def level_nodes(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.level == k)

    def aspect_ratios(self) -> np.ndarray:
        s = self.hi - self.lo
        return s.max(1) / s.min(1)

    def diameters(self) -> np.ndarray:
        return np.sqrt(np.sum((self.hi - self.lo) ** 2, axis=1))

    def locate(self, points: np.ndarray, depth: int | None = None) -> np.ndarray:
        """Node at ``depth`` (or the leaf) holding each point; ties go left."""
        points = np.atleast_2d(points)
        node = np.zeros(len(points), dtype=np.int64)
        while True:
            go = self.left[node] >= 0
            if depth is not None:
                go &= self.level[node] < depth
            if not go.any():
                return node
            idx = np.flatnonzero(go)
            nd = node[idx]
            x = points[idx, self.axis[nd]]
            node[idx] = np.where(x <= self.pos[nd], self.left[nd], self.right[nd])

    def to_json(self) -> str:
        rows = [
            {"lo": self.lo[i].tolist(), "hi": self.hi[i].tolist(), "level": int(self.level[i]), "nu_mass": float(self.nu_mass[i])}
            for i in range(len(self.level))
        ]
        return json.dumps(rows)


class PartitionNode:
    """View of one node of a :class:`PartitionTree`."""

    __slots__ = ("tree", "index")

    def __init__(self, tree: PartitionTree, index: int):
        self.tree = tree
        self.index = index

    @property
    def box(self) -> Box:
        return Box(tuple(self.tree.lo[self.index]), tuple(self.tree.hi[self.index]))

    @property
    def level(self) -> int:
        return int(self.tree.level[self.index])

    @property
    def nu_mass(self) -> float:
        return float(self.tree.nu_mass[self.index])

    @property
    def split_axis(self) -> int | None:
        return None if self.tree.left[self.index] < 0 else int(self.tree.axis[self.index])

    @property
    def children(self) -> list[PartitionNode]:
        i = self.index
        if self.tree.left[i] < 0:
            return []
        return [PartitionNode(self.tree, int(self.tree.left[i])), PartitionNode(self.tree, int(self.tree.right[i]))]

    def __repr__(self) -> str:
        return f"PartitionNode(level={self.level}, box={self.box}, nu_mass={self.nu_mass:.6g})"


def build_tree(
    root: Box,
    depth: int,
    split_rule,
    mass_fn,
    mode: str,
    keep_splitting=None,
) -> PartitionTree:
    """Grow a tree level by level.

    ``split_rule(lo, hi, axis)`` returns split coordinates for a batch of
    boxes; ``keep_splitting(lo, hi)`` optionally masks which boxes split.
    """
    if depth < 0 or depth > MAX_DEPTH:
        raise PartitionError(f"depth must lie in [0, {MAX_DEPTH}]")
    lo = [root.lo_arr[None]]
    hi = [root.hi_arr[None]]
    level = [np.zeros(1, dtype=np.int64)]
    mass = [mass_fn(root.lo_arr[None], root.hi_arr[None])]
    left_parts = []
    right_parts = []
    axis_parts = []
    pos_parts = []
    frontier = np.array([0])
    count = 1
    cur_lo, cur_hi = lo[0], hi[0]
    for k in range(depth):
        split = np.ones(len(frontier), dtype=bool)
        if keep_splitting is not None:
            split = keep_splitting(cur_lo, cur_hi)
        ax = _longest_axis(cur_lo, cur_hi)
        pos = np.full(len(frontier), np.nan)
        lft = np.full(len(frontier), -1, dtype=np.int64)
        rgt = np.full(len(frontier), -1, dtype=np.int64)
        s = np.flatnonzero(split)
        axis_parts.append(np.where(split, ax, -1))
        if s.size == 0:
            pos_parts.append(pos)
            left_parts.append(lft)
            right_parts.append(rgt)
            break
        pos[s] = split_rule(cur_lo[s], cur_hi[s], ax[s])
        m = s.size
        child_lo = np.repeat(cur_lo[s], 2, axis=0)
        child_hi = np.repeat(cur_hi[s], 2, axis=0)
        rows = np.arange(m)
        child_hi[2 * rows, ax[s]] = pos[s]
        child_lo[2 * rows + 1, ax[s]] = pos[s]
        lft[s] = count + 2 * rows
        rgt[s] = count + 2 * rows + 1
        pos_parts.append(pos)
        left_parts.append(lft)
        right_parts.append(rgt)
        count += 2 * m
        lo.append(child_lo)
        hi.append(child_hi)
        level.append(np.full(2 * m, k + 1, dtype=np.int64))
        mass.append(mass_fn(child_lo, child_hi))
        frontier = np.arange(count - 2 * m, count)
        cur_lo, cur_hi = child_lo, child_hi
    n_nodes = count
    left = np.full(n_nodes, -1, dtype=np.int64)
    right = np.full(n_nodes, -1, dtype=np.int64)
    axis = np.full(n_nodes, -1, dtype=np.int64)
    posv = np.full(n_nodes, np.nan)
    start = 0
    sizes = [len(x) for x in level]
    for k, (lf, rg, ax, ps) in enumerate(zip(left_parts, right_parts, axis_parts, pos_parts)):
        sl = slice(start, start + sizes[k])
        left[sl] = lf
        right[sl] = rg
        axis[sl] = ax
        posv[sl] = ps
        start += sizes[k]
    return PartitionTree(
        np.concatenate(lo), np.concatenate(hi), np.concatenate(level), np.concatenate(mass), left, right, axis, posv, mode
    )


def _volume(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.prod(hi - lo, axis=1)


def dyadic_lebesgue(box: Box, depth: int) -> PartitionTree:
    """Family G_k: midpoint bisection through the longest side."""

    def rule(lo, hi, ax):
        rows = np.arange(len(lo))
        return 0.5 * (lo[rows, ax] + hi[rows, ax])

    return build_tree(box, depth, rule, _volume, "lebesgue")


def dyadic_nu(density: Density | Field, box: Box, depth: int, check_aspect: bool = True) -> PartitionTree:
    """Family F_k: bisection through the longest side into equal density mass."""
    field, lam = _as_field(density)
    if field.mass_of_box(box) <= 0:
        raise PartitionError(f"density has no mass on {box}")

    def rule(lo, hi, ax):
        t = field.split_position(lo, hi, ax, 0.5)
        rows = np.arange(len(lo))
        bad = ~((t > lo[rows, ax]) & (t < hi[rows, ax]))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise PartitionError(
                f"no interior equal-mass split for box lo={lo[i]} hi={hi[i]} axis={ax[i]}; "
                f"mass={field.mass(lo[i:i+1], hi[i:i+1])[0]!r}"
            )
        return t

    tree = build_tree(box, depth, rule, field.mass, "nu")
    if check_aspect and math.isfinite(lam):
        worst = tree.aspect_ratios().max()
        if worst > 2 * lam**2 * (1 + ASPECT_RTOL):
            raise PartitionError(f"aspect ratio {worst} exceeds 2*lambda^2 = {2 * lam**2}")
    return tree


@dataclass
class RectanglePartition:
    lo: np.ndarray
    hi: np.ndarray
    nu_mass_each: float
    lam: float

    @property
    def n(self) -> int:
        return len(self.lo)

    @property
    def rects(self) -> list[Box]:
        return [Box(tuple(a), tuple(b)) for a, b in zip(self.lo, self.hi)]

    def aspect_ratios(self) -> np.ndarray:
        s = self.hi - self.lo
        return s.max(1) / s.min(1)

    def diameters(self) -> np.ndarray:
        return np.sqrt(np.sum((self.hi - self.lo) ** 2, axis=1))

    def measured_constant(self) -> float:
        """max diam(Q_i) * sqrt(n), the empirical diameter constant."""
        return float(self.diameters().max() * math.sqrt(self.n))


def rectangle_partition_n(density: Density | Field, n: int, box: Box | None = None, check_aspect: bool = True) -> RectanglePartition:
    """n boxes of equal density mass built by count-weighted bisection.

    A region holding m units is cut through its longest side into
    floor(m/2) units (lower side) and ceil(m/2) units.
    """
    if n < 1:
        raise PartitionError("empty partition")
    field, lam = _as_field(density)
    if box is None:
        box = field.support_box()
    lo = box.lo_arr[None].copy()
    hi = box.hi_arr[None].copy()
    m = np.array([n], dtype=np.int64)
    done_lo, done_hi = [], []
    total = field.mass_of_box(box)
    while len(m):
        fin = m == 1
        done_lo.append(lo[fin])
        done_hi.append(hi[fin])
        lo, hi, m = lo[~fin], hi[~fin], m[~fin]
        if not len(m):
            break
        ax = _longest_axis(lo, hi)
        low = m // 2
        t = field.split_position(lo, hi, ax, low / m)
        rows = np.arange(len(m))
        lo2 = np.concatenate([lo, lo])
        hi2 = np.concatenate([hi, hi])
        hi2[rows, ax] = t
        lo2[len(m) + rows, ax] = t
        lo, hi, m = lo2, hi2, np.concatenate([low, m - low])
    part = RectanglePartition(np.concatenate(done_lo), np.concatenate(done_hi), total / n, lam)
    order = np.lexsort(part.lo.T[::-1])
    part.lo, part.hi = part.lo[order], part.hi[order]
    if check_aspect and math.isfinite(lam):
        worst = part.aspect_ratios().max()
        if not worst < 3 * lam**2 * (1 + ASPECT_RTOL):
            raise PartitionError(f"aspect ratio {worst} is not below 3*lambda^2 = {3 * lam**2}")
    return part
