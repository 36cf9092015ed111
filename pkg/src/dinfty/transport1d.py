"""Monotone transport between piecewise-constant densities on a segment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Atoms, PushedMeasure, WeightedBoxes


class MassMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class PiecewiseConstantDensity1D:
    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if bp.ndim != 1 or v.ndim != 1 or len(bp) != len(v) + 1 or len(v) == 0:
            raise ValueError("need m+1 breakpoints for m values")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("density values must be finite and nonnegative")
        if not np.sum(v * np.diff(bp)) > 0:
            raise ValueError("total mass must be positive")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, a: float, b: float, value: float = 1.0) -> PiecewiseConstantDensity1D:
        return cls(np.array([a, b]), np.array([value]))

    def cdf_knots(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.values * np.diff(self.breakpoints))])

    @property
    def mass(self) -> float:
        return float(self.cdf_knots()[-1])

    def cdf(self, t: np.ndarray) -> np.ndarray:
        return np.interp(t, self.breakpoints, self.cdf_knots())

    def mass_between(self, a: float, b: float) -> float:
        return float(self.cdf(b) - self.cdf(a))


def _inverse_left(t: np.ndarray, h: np.ndarray, u: float) -> float:
    """inf{x : H(x) >= u} for the piecewise-linear CDF with knots (t, h)."""
    j = int(np.searchsorted(h, u, side="left"))
    if j == 0:
        return float(t[0])
    if j >= len(h):
        return float(t[-1])
    slope = (h[j] - h[j - 1]) / (t[j] - t[j - 1])
    return float(t[j - 1] + (u - h[j - 1]) / slope)


@dataclass(frozen=True)
class MonotoneMap1D:
    """Nondecreasing piecewise-affine map.

    Piece ``i`` covers ``[knots[i], knots[i+1]]`` and maps it affinely onto
    ``[left[i], right[i]]``. ``active[i]`` is False on pieces carrying no
    source mass; they are ignored when measuring displacement.
    """

    knots: np.ndarray
    left: np.ndarray
    right: np.ndarray
    active: np.ndarray

    def _piece(self, t: np.ndarray) -> np.ndarray:
        i = np.searchsorted(self.knots, t, side="right") - 1
        return np.clip(i, 0, len(self.left) - 1)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        i = self._piece(t)
        s0 = self.knots[i]
        s1 = self.knots[i + 1]
        w = (t - s0) / (s1 - s0)
        return self.left[i] + (self.right[i] - self.left[i]) * w

    def displacement(self) -> float:
        """Exact sup of |T(t) - t| over pieces with source mass."""
        if not self.active.any():
            return 0.0
        a = np.abs(self.left - self.knots[:-1])[self.active]
        b = np.abs(self.right - self.knots[1:])[self.active]
        return float(max(a.max(), b.max()))

    def slopes(self) -> np.ndarray:
        return (self.right - self.left) / np.diff(self.knots)

    def is_monotone(self) -> bool:
        seq = np.ravel(np.column_stack([self.left, self.right]))
        return bool(np.all(np.diff(seq) >= -1e-15 * max(1.0, np.abs(seq).max())))

    def pushforward(self, wb: WeightedBoxes) -> PushedMeasure:
        """Exact image of a measure on the line given as weighted intervals."""
        if wb.lo.shape[1] != 1:
            raise ValueError("MonotoneMap1D acts on one-dimensional measures")
        out_lo, out_hi, out_d, atom_x, atom_m = [], [], [], [], []
        for lo, hi, dens in zip(wb.lo[:, 0], wb.hi[:, 0], wb.dens):
            for i in range(len(self.left)):
                a, b = max(lo, self.knots[i]), min(hi, self.knots[i + 1])
                if b <= a:
                    continue
                scale = (self.right[i] - self.left[i]) / (self.knots[i + 1] - self.knots[i])
                ta = self.left[i] + scale * (a - self.knots[i])
                tb = self.left[i] + scale * (b - self.knots[i])
                m = dens * (b - a)
                if tb > ta:
                    out_lo.append(ta)
                    out_hi.append(tb)
                    out_d.append(m / (tb - ta))
                else:
                    atom_x.append(ta)
                    atom_m.append(m)
        boxes = WeightedBoxes(np.array(out_lo).reshape(-1, 1), np.array(out_hi).reshape(-1, 1), np.array(out_d))
        atoms = Atoms(np.array(atom_x).reshape(-1, 1), np.array(atom_m)) if atom_m else None
        return PushedMeasure(boxes, atoms)

    def pushed_mass(self, source: PiecewiseConstantDensity1D, a: float, b: float) -> float:
        """Source mass sent into [a, b] (atoms at the ends included)."""
        total = 0.0
        for i in range(len(self.left)):
            s0, s1 = self.knots[i], self.knots[i + 1]
            t0, t1 = self.left[i], self.right[i]
            m = source.mass_between(s0, s1)
            if m <= 0:
                continue
            if t1 == t0:
                if a <= t0 <= b:
                    total += m
                continue
            lo, hi = max(a, t0), min(b, t1)
            if hi <= lo:
                continue
            # the map is affine on the piece, so invert the clipped range
            r0 = s0 + (lo - t0) / (t1 - t0) * (s1 - s0)
            r1 = s0 + (hi - t0) / (t1 - t0) * (s1 - s0)
            total += source.mass_between(r0, r1)
        return total


def cdf_transport(
    source: PiecewiseConstantDensity1D, target: PiecewiseConstantDensity1D, rtol: float = 1e-12
) -> MonotoneMap1D:
    """Monotone map H^{-1} o F pushing ``source`` onto ``target``."""
    fs = source.cdf_knots()
    ht = target.cdf_knots()
    m_s, m_t = fs[-1], ht[-1]
    if abs(m_s - m_t) > rtol * max(m_s, m_t):
        raise MassMismatchError(f"unequal masses: {m_s!r} vs {m_t!r}")
    ht = ht * (m_s / m_t)
    ht[-1] = m_s
    s = source.breakpoints
    t = target.breakpoints
    knots: list[float] = [float(s[0])]
    left: list[float] = []
    right: list[float] = []
    active: list[bool] = []
    for k in range(len(source.values)):
        u0, u1 = fs[k], fs[k + 1]
        if source.values[k] == 0 or u1 <= u0:
            left.append(_inverse_left(t, ht, u0))
            right.append(left[-1])
            knots.append(float(s[k + 1]))
            active.append(False)
            continue
        inner = ht[(ht > u0) & (ht < u1)]
        us = np.unique(np.concatenate([[u0], inner, [u1]]))
        rate = source.values[k]
        for a, b in zip(us[:-1], us[1:]):
            mid = 0.5 * (a + b)
            j = int(np.searchsorted(ht, mid, side="right") - 1)
            slope = (ht[j + 1] - ht[j]) / (t[j + 1] - t[j])
            left.append(float(t[j] + (a - ht[j]) / slope))
            right.append(float(t[j] + (b - ht[j]) / slope))
            end = s[k + 1] if b == u1 else s[k] + (b - u0) / rate
            knots.append(float(end))
            active.append(True)
    return MonotoneMap1D(np.array(knots), np.array(left), np.array(right), np.array(active, dtype=bool))


def displacement_bound_two_valued(L: float, c1: float) -> float:
    """Sup displacement when a constant density on a segment of length L is
    moved onto values c1 (first half) and 2 - c1 (second half)."""
    if L <= 0 or c1 < 0:
        raise ValueError("need L > 0 and c1 >= 0")
    return 0.5 * L * abs(c1 - 1.0)


def two_valued_map(
    lo: np.ndarray, hi: np.ndarray, t_split: np.ndarray, a: np.ndarray, c1: np.ndarray, c2: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised kink of the map sending density ``a`` on [lo, hi] onto
    ``c1`` on [lo, t_split] and ``c2`` on [t_split, hi].

    Returns the source kink ``s`` (with a*(s-lo) = c1*(t_split-lo)) and the
    exact sup displacement ``|t_split - s|``.
    """
    s = lo + c1 * (t_split - lo) / a
    s = np.clip(s, lo, hi)
    return s, np.abs(t_split - s)
