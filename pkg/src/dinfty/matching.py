"""Bottleneck matching, the planar rectangle-to-sample matching and a grid
discrepancy diagnostic."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .core import Box, Density, EmpiricalMeasure, Field, assign_to_boxes, point_box_farthest
from .partition import RectanglePartition, rectangle_partition_n


def euclid(gap: np.ndarray) -> np.ndarray:
    """Norm along the last axis; the single formula used for every cost."""
    return np.sqrt(np.sum(gap * gap, axis=-1))


def box_point_cost(lo: np.ndarray, hi: np.ndarray, x: np.ndarray) -> np.ndarray:
    gap = np.maximum(np.maximum(lo - x, 0.0), x - hi)
    return euclid(gap)


@dataclass(frozen=True)
class BipartiteInstance:
    """Left side: boxes [lo, hi] (points when lo == hi). Right side: points."""

    left_lo: np.ndarray
    left_hi: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.left_lo, dtype=float))
        hi = np.atleast_2d(np.asarray(self.left_hi, dtype=float))
        r = np.atleast_2d(np.asarray(self.right, dtype=float))
        if lo.shape != hi.shape or lo.shape != r.shape:
            raise ValueError("both sides need the same number of items and dimension")
        object.__setattr__(self, "left_lo", lo)
        object.__setattr__(self, "left_hi", hi)
        object.__setattr__(self, "right", r)

    @classmethod
    def points(cls, left: np.ndarray, right: np.ndarray) -> BipartiteInstance:
        left = np.atleast_2d(np.asarray(left, dtype=float))
        return cls(left, left, right)

    @property
    def n(self) -> int:
        return len(self.right)

    def cost(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        """Cost between left item i and right point j."""
        return box_point_cost(self.left_lo[i], self.left_hi[i], self.right[j])


@dataclass
class MatchingResult:
    """``perm[i]`` is the right point matched to left item ``i``."""

    perm: np.ndarray
    bottleneck_radius: float
    feasible: bool = True
    escalated: bool = False
    threshold: float | None = None
    feasibility_runs: int = 0
    certificate: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path, costs: np.ndarray) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "distance"])
            for i, (j, c) in enumerate(zip(self.perm, costs)):
                w.writerow([i, int(j), repr(float(c))])

    def summary_json(self) -> str:
        return json.dumps({"radius": self.bottleneck_radius, "escalated": self.escalated, "n": int(len(self.perm))})


# ---------------------------------------------------------------------------
# candidate edges


def candidate_edges(
    lo: np.ndarray, hi: np.ndarray, x: np.ndarray, radius: float, chunk: int = 8192
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All (box i, point j, cost) with cost <= radius, via grid bucketing."""
    n, d = x.shape
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    s = radius + float(np.max(euclid(half))) + 1e-300
    s = max(s, float(np.max(np.ptp(np.vstack([lo, hi, x]), axis=0))) / 2**20)
    base = np.floor(np.minimum(x.min(0), center.min(0)) / s) - 2
    kc = (np.floor(center / s) - base).astype(np.int64)
    kx = (np.floor(x / s) - base).astype(np.int64)
    dims = np.maximum(kc.max(0), kx.max(0)) + 3
    mult = np.cumprod(np.concatenate([[1], dims[:-1]]))
    keyc = kc @ mult
    order = np.argsort(keyc, kind="stable")
    keys = keyc[order]
    offs = np.array(np.meshgrid(*[[-1, 0, 1]] * d, indexing="ij")).reshape(d, -1).T
    out_i, out_j, out_c = [], [], []
    for a in range(0, n, chunk):
        xs = x[a : a + chunk]
        kxx = kx[a : a + chunk]
        for off in offs:
            key = (kxx + off) @ mult
            left = np.searchsorted(keys, key, "left")
            right = np.searchsorted(keys, key, "right")
            cnt = right - left
            tot = int(cnt.sum())
            if tot == 0:
                continue
            jj = np.repeat(np.arange(len(xs)), cnt)
            start = np.repeat(left - (np.cumsum(cnt) - cnt), cnt)
            ii = order[start + np.arange(tot)]
            c = box_point_cost(lo[ii], hi[ii], xs[jj])
            keep = c <= radius
            out_i.append(ii[keep])
            out_j.append(jj[keep] + a)
            out_c.append(c[keep])
    if not out_i:
        z = np.zeros(0, dtype=np.int64)
        return z, z, np.zeros(0)
    return np.concatenate(out_i), np.concatenate(out_j), np.concatenate(out_c)


def all_edges(inst: BipartiteInstance) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = inst.n
    i = np.repeat(np.arange(n), n)
    j = np.tile(np.arange(n), n)
    return i, j, inst.cost(i, j)


# ---------------------------------------------------------------------------
# Hopcroft-Karp on a CSR graph whose rows are sorted by cost; only the
# first deg[u] entries of row u are usable at the current threshold.


@njit(cache=True)
def _hopcroft_karp(indptr, indices, deg, mpos, match_r):
    n_l = len(indptr) - 1
    inf = np.int64(1) << 60
    dist = np.empty(n_l, np.int64)
    queue = np.empty(n_l, np.int64)
    it = np.empty(n_l, np.int64)
    stack = np.empty(n_l + 1, np.int64)
    size = 0
    for u in range(n_l):
        if mpos[u] >= 0:
            size += 1
    while True:
        qt = 0
        for u in range(n_l):
            if mpos[u] < 0:
                dist[u] = 0
                queue[qt] = u
                qt += 1
            else:
                dist[u] = inf
        qh = 0
        found = False
        while qh < qt:
            u = queue[qh]
            qh += 1
            for p in range(indptr[u], indptr[u] + deg[u]):
                w = match_r[indices[p]]
                if w < 0:
                    found = True
                elif dist[w] == inf:
                    dist[w] = dist[u] + 1
                    queue[qt] = w
                    qt += 1
        if not found:
            break
        for u in range(n_l):
            it[u] = indptr[u]
        for s in range(n_l):
            if mpos[s] >= 0 or dist[s] != 0:
                continue
            sp = 0
            stack[0] = s
            while sp >= 0:
                u = stack[sp]
                if it[u] >= indptr[u] + deg[u]:
                    dist[u] = inf
                    sp -= 1
                    if sp >= 0:
                        it[stack[sp]] += 1
                    continue
                v = indices[it[u]]
                w = match_r[v]
                if w < 0:
                    for k in range(sp, -1, -1):
                        uu = stack[k]
                        vv = indices[it[uu]]
                        mpos[uu] = it[uu]
                        match_r[vv] = uu
                    size += 1
                    break
                elif dist[w] == dist[u] + 1:
                    sp += 1
                    stack[sp] = w
                else:
                    it[u] += 1
    return size


@njit(cache=True)
def _drop_long(indptr, indices, deg, mpos, match_r):
    for u in range(len(indptr) - 1):
        p = mpos[u]
        if p >= 0 and p >= indptr[u] + deg[u]:
            match_r[indices[p]] = -1
            mpos[u] = -1


@njit(cache=True)
def _alternating_reach(indptr, indices, deg, mpos, match_r):
    """Left vertices reachable from free left vertices by alternating paths."""
    n_l = len(indptr) - 1
    seen = np.zeros(n_l, np.bool_)
    queue = np.empty(n_l, np.int64)
    qt = 0
    for u in range(n_l):
        if mpos[u] < 0:
            seen[u] = True
            queue[qt] = u
            qt += 1
    qh = 0
    while qh < qt:
        u = queue[qh]
        qh += 1
        for p in range(indptr[u], indptr[u] + deg[u]):
            w = match_r[indices[p]]
            if w >= 0 and not seen[w]:
                seen[w] = True
                queue[qt] = w
                qt += 1
    return seen


@njit(cache=True)
def _build_csr(n, ei, ej, ec):
    counts = np.zeros(n + 1, np.int64)
    for e in range(len(ei)):
        counts[ei[e] + 1] += 1
    indptr = np.cumsum(counts)
    fill = indptr[:-1].copy()
    indices = np.empty(len(ei), np.int64)
    costs = np.empty(len(ei))
    for e in range(len(ei)):
        p = fill[ei[e]]
        indices[p] = ej[e]
        costs[p] = ec[e]
        fill[ei[e]] += 1
    for u in range(n):
        a = indptr[u]
        b = indptr[u + 1]
        if b - a > 1:
            o = np.argsort(costs[a:b], kind="mergesort")
            indices[a:b] = indices[a:b][o]
            costs[a:b] = costs[a:b][o]
    return indptr, indices, costs


@njit(cache=True)
def _prefix_degrees(indptr, costs, r):
    n = len(indptr) - 1
    deg = np.empty(n, np.int64)
    for u in range(n):
        a = indptr[u]
        b = indptr[u + 1]
        lo = a
        hi = b
        while lo < hi:
            mid = (lo + hi) // 2
            if costs[mid] <= r:
                lo = mid + 1
            else:
                hi = mid
        deg[u] = lo - a
    return deg


class ThresholdGraph:
    """Candidate edges in CSR form with a movable cost threshold."""

    def __init__(self, n: int, ei: np.ndarray, ej: np.ndarray, ec: np.ndarray):
        self.n = n
        self.indptr, self.indices, self.costs = _build_csr(
            n, ei.astype(np.int64), ej.astype(np.int64), ec.astype(np.float64)
        )
        self.mpos = np.full(n, -1, dtype=np.int64)
        self.match_r = np.full(n, -1, dtype=np.int64)
        self.runs = 0

    def degrees(self, r: float) -> np.ndarray:
        # rows are sorted by cost, so the usable edges form a prefix
        return _prefix_degrees(self.indptr, self.costs, float(r))

    def feasible(self, r: float) -> bool:
        deg = self.degrees(r)
        _drop_long(self.indptr, self.indices, deg, self.mpos, self.match_r)
        size = _hopcroft_karp(self.indptr, self.indices, deg, self.mpos, self.match_r)
        self.runs += 1
        return size == self.n

    def hall_violator(self, r: float) -> tuple[np.ndarray, np.ndarray]:
        """After a failed run at ``r``: left set I and its neighbourhood N(I), |N(I)| < |I|."""
        deg = self.degrees(r)
        seen = _alternating_reach(self.indptr, self.indices, deg, self.mpos, self.match_r)
        left = np.flatnonzero(seen)
        nbrs = set()
        for u in left:
            nbrs.update(self.indices[self.indptr[u] : self.indptr[u] + deg[u]].tolist())
        return left, np.array(sorted(nbrs), dtype=np.int64)

    def permutation(self) -> np.ndarray:
        return self.indices[self.mpos]


def _initial_radius(inst: BipartiteInstance) -> float:
    n, d = inst.right.shape
    pts = np.vstack([inst.left_lo, inst.left_hi, inst.right])
    span = float(euclid(np.ptp(pts, axis=0)))
    if n <= 64:
        return span
    return span * min(1.0, 0.7 * (math.log(n) / n) ** (1.0 / d))


def bottleneck_match(inst: BipartiteInstance, max_edges: int = 60_000_000) -> MatchingResult:
    """Exact bottleneck matching: smallest r admitting a perfect matching on
    {(i, j): cost(i, j) <= r}, found by search over realised costs."""
    n = inst.n
    if n == 0:
        raise ValueError("need at least one point per side")
    r_hi = _initial_radius(inst)
    while True:
        if n <= 64:
            ei, ej, ec = all_edges(inst)
        else:
            ei, ej, ec = candidate_edges(inst.left_lo, inst.left_hi, inst.right, r_hi)
        if len(ec) > max_edges:
            raise MemoryError(f"{len(ec)} candidate edges exceed the cap {max_edges}")
        low_row = np.full(n, np.inf)
        np.minimum.at(low_row, ei, ec)
        low_col = np.full(n, np.inf)
        np.minimum.at(low_col, ej, ec)
        # every row and column needs an edge, which bounds r* from below
        lb = max(low_row.max(), low_col.max())
        if np.isfinite(lb):
            graph = ThresholdGraph(n, ei, ej, ec)
            radii = np.unique(ec)
            lo_idx = int(np.searchsorted(radii, lb, side="left"))
            hi_idx = len(radii) - 1
            # gallop upwards from the lower bound: raising the threshold keeps
            # the current matching valid, so it only ever grows here
            step = max(1, len(radii) // 4096)
            probe = lo_idx
            found = False
            while True:
                if graph.feasible(float(radii[probe])):
                    hi_idx = probe
                    found = True
                    break
                lo_idx = probe + 1
                if probe == hi_idx:
                    break
                probe = min(hi_idx, probe + step)
                step *= 2
            if found:
                break
        if n <= 64:  # pragma: no cover - the complete graph always matches
            raise RuntimeError("complete bipartite graph without a perfect matching")
        r_hi *= 1.5
    while lo_idx < hi_idx:
        mid = (lo_idx + hi_idx) // 2
        if graph.feasible(float(radii[mid])):
            hi_idx = mid
        else:
            lo_idx = mid + 1
    r_star = float(radii[hi_idx])
    if not graph.feasible(r_star):  # pragma: no cover - would be a solver bug
        raise RuntimeError("bottleneck search ended on an infeasible radius")
    best = graph.permutation().copy()
    cert = {"feasible_at": r_star}
    if hi_idx > 0:
        below = float(radii[hi_idx - 1])
        ok = graph.feasible(below)
        cert["next_smaller"] = below
        cert["feasible_at_next_smaller"] = ok
        if not ok:
            left, nbrs = graph.hall_violator(below)
            cert["hall_set_size"] = int(len(left))
            cert["hall_neighbourhood_size"] = int(len(nbrs))
    radius = float(inst.cost(np.arange(n), best).max())
    return MatchingResult(best, radius, True, False, None, graph.runs, cert)


def matching_at_threshold(inst: BipartiteInstance, r: float) -> tuple[bool, MatchingResult | None, dict]:
    """Perfect matching within radius r, or a Hall violator when none exists."""
    if inst.n <= 64:
        ei, ej, ec = all_edges(inst)
        keep = ec <= r
        ei, ej, ec = ei[keep], ej[keep], ec[keep]
    else:
        ei, ej, ec = candidate_edges(inst.left_lo, inst.left_hi, inst.right, r)
    graph = ThresholdGraph(inst.n, ei, ej, ec)
    if graph.feasible(r):
        perm = graph.permutation()
        rad = float(inst.cost(np.arange(inst.n), perm).max())
        return True, MatchingResult(perm, rad, True, False, r, graph.runs), {}
    left, nbrs = graph.hall_violator(r)
    return False, None, {"I": left, "N_I": nbrs}


# ---------------------------------------------------------------------------
# planar matching of an equal-mass rectangle partition to the sample


def l2_level(n: int, l_cfg: float = 1.0) -> int:
    """Largest integer l with 2^{-l} >= 2^6 L (ln n)^{3/4} / sqrt(n)."""
    if n < 2:
        return -64
    target = 64.0 * l_cfg * math.log(n) ** 0.75 / math.sqrt(n)
    return int(math.floor(-math.log2(target)))


@dataclass
class HallTransport:
    """Map sending rectangle i of the partition to its matched sample."""

    lo: np.ndarray
    hi: np.ndarray
    targets: np.ndarray
    matching: MatchingResult
    displacement: float
    threshold: float
    mass_each: float

    vectorized = True

    @property
    def certified_bound(self) -> float:
        return self.displacement

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        k = assign_to_boxes(points, self.lo, self.hi)
        out = points.copy()
        ok = k >= 0
        out[ok] = self.targets[k[ok]]
        return out

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return self(points)


def hall_matching_2d(
    density: Density | Field,
    sample: EmpiricalMeasure | np.ndarray,
    partition: RectanglePartition | None = None,
    l_cfg: float = 1.0,
    n_total: int | None = None,
    box: Box | None = None,
) -> HallTransport:
    """Bijection between the n equal-mass rectangles and the n samples.

    The neighbourhood threshold is 2*sqrt(2)*2^{-l2}. The matching used is
    the bottleneck-optimal one on rectangle-to-point distances; if its
    radius exceeds the threshold the run is flagged as escalated.
    """
    pts = sample.points if isinstance(sample, EmpiricalMeasure) else np.atleast_2d(sample)
    n = len(pts)
    if pts.shape[1] != 2:
        raise ValueError("hall_matching_2d is planar")
    n_total = n if n_total is None else n_total
    if partition is None:
        partition = rectangle_partition_n(density, n, box=box)
    if partition.n != n:
        raise ValueError("partition size differs from the sample size")
    l2 = l2_level(n_total, l_cfg)
    threshold = 2 * math.sqrt(2) * 2.0 ** (-l2)
    inst = BipartiteInstance(partition.lo, partition.hi, pts)
    res = bottleneck_match(inst)
    res.threshold = threshold
    res.escalated = res.bottleneck_radius > threshold
    targets = pts[res.perm]
    disp = float(point_box_farthest(targets, partition.lo, partition.hi).max())
    return HallTransport(partition.lo, partition.hi, targets, res, disp, threshold, partition.nu_mass_each)


# ---------------------------------------------------------------------------
# discrepancy over grid-aligned rectangles


@njit(cache=True)
def _max_rect_discrepancy(diff, edges_x, edges_y):
    gx = diff.shape[0]
    gy = diff.shape[1]
    col = np.zeros(gy + 1)
    best = 0.0
    arg = np.zeros(4, np.int64)
    for x0 in range(gx):
        for j in range(gy + 1):
            col[j] = 0.0
        for x1 in range(x0 + 1, gx + 1):
            acc = 0.0
            pref = np.empty(gy + 1)
            pref[0] = 0.0
            for j in range(gy):
                col[j + 1] += diff[x1 - 1, j]
            for j in range(gy):
                acc += col[j + 1]
                pref[j + 1] = acc
            w = edges_x[x1] - edges_x[x0]
            for y0 in range(gy):
                for y1 in range(y0 + 1, gy + 1):
                    h = edges_y[y1] - edges_y[y0]
                    val = abs(pref[y1] - pref[y0]) / (2.0 * (w + h))
                    if val > best:
                        best = val
                        arg[0] = x0
                        arg[1] = x1
                        arg[2] = y0
                        arg[3] = y1
    return best, arg


@dataclass
class DiscrepancyReport:
    max_ratio: float
    rectangle: Box
    count_minus_mass: float
    mesh_exponent: int


def grid_discrepancy_diagnostic(sample: EmpiricalMeasure, density: Density, mesh_exponent: int) -> DiscrepancyReport:
    """max over grid-aligned rectangles R of |n nu_n(R) - n nu(R)| /
    (perimeter(R) sqrt(n) (ln n)^{3/4}), with ln n floored at 1."""
    m = 2**mesh_exponent
    if m > 256:
        raise ValueError("diagnostic mesh cap: 2^l must not exceed 256")
    if density.dim != 2:
        raise ValueError("the diagnostic is planar")
    bb = density.domain.bounding_box()
    ex = np.linspace(bb.lo[0], bb.hi[0], m + 1)
    ey = np.linspace(bb.lo[1], bb.hi[1], m + 1)
    glo = np.stack(np.meshgrid(ex[:-1], ey[:-1], indexing="ij"), -1).reshape(-1, 2)
    ghi = np.stack(np.meshgrid(ex[1:], ey[1:], indexing="ij"), -1).reshape(-1, 2)
    n = sample.n
    mass = density.mass(glo, ghi).reshape(m, m) * n
    ix = np.clip(np.searchsorted(ex, sample.points[:, 0], side="left") - 1, 0, m - 1)
    iy = np.clip(np.searchsorted(ey, sample.points[:, 1], side="left") - 1, 0, m - 1)
    counts = np.zeros((m, m))
    np.add.at(counts, (ix, iy), 1.0)
    diff = counts - mass
    best, arg = _max_rect_discrepancy(diff, ex, ey)
    scale = math.sqrt(n) * max(math.log(n), 1.0) ** 0.75
    rect = Box((ex[arg[0]], ey[arg[2]]), (ex[arg[1]], ey[arg[3]]))
    per = 2 * ((rect.hi[0] - rect.lo[0]) + (rect.hi[1] - rect.lo[1]))
    return DiscrepancyReport(best / scale, rect, best * per, mesh_exponent)
