"""Binomial tail bounds and certified lower bounds on d_inf(nu, nu_n)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import Density, EmpiricalMeasure

MAX_MESH = 128
# margin against rounding in the grid masses
MASS_TOL = 1e-9


@dataclass(frozen=True)
class TailBound:
    m: int
    p: float
    t: float
    bound: float
    kind: str


def _check(m: int, p: float, t: float) -> None:
    if m < 1:
        raise ValueError("need m >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError("need p in [0, 1]")
    if not t > 0:
        raise ValueError("need t > 0")


def chernoff(m: int, p: float, t: float) -> TailBound:
    """P(|S_m/m - p| >= t) <= 2 exp(-2 m t^2)."""
    _check(m, p, t)
    return TailBound(m, p, t, 2.0 * math.exp(-2.0 * m * t * t), "chernoff")


def bernstein(m: int, p: float, t: float) -> TailBound:
    """P(|S_m/m - p| >= t) <= 2 exp(-(m t^2 / 2) / (p(1-p) + t/3))."""
    _check(m, p, t)
    return TailBound(m, p, t, 2.0 * math.exp(-(0.5 * m * t * t) / (p * (1.0 - p) + t / 3.0)), "bernstein")


@dataclass
class LowerBoundCertificate:
    """d_inf(nu, nu_n) >= r.

    ``kind`` is "mass" when nu_n(A) > nu(A^r) for the union A of
    ``witness_cells``, "empty-ball" when no sample lies within r of
    ``center`` (a point of the support of nu), and "none" for r = 0.
    """

    r: float
    kind: str
    witness_cells: list = field(default_factory=list)
    nu_n_mass: float = 0.0
    nu_enlarged_mass: float = 0.0
    center: list | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "r": self.r,
                "kind": self.kind,
                "witness_cells": self.witness_cells,
                "nu_n_mass": self.nu_n_mass,
                "nu_enlarged_mass": self.nu_enlarged_mass,
                "center": self.center,
            }
        )


def _grid(density: Density, m: int):
    bb = density.domain.bounding_box()
    edges = [np.linspace(a, b, m + 1) for a, b in zip(bb.lo, bb.hi)]
    grids_lo = np.meshgrid(*[e[:-1] for e in edges], indexing="ij")
    grids_hi = np.meshgrid(*[e[1:] for e in edges], indexing="ij")
    lo = np.stack([g.ravel() for g in grids_lo], axis=1)
    hi = np.stack([g.ravel() for g in grids_hi], axis=1)
    return bb, edges, lo, hi


def _empty_ball(density: Density, sample: EmpiricalMeasure, per_axis: int) -> tuple[float, np.ndarray]:
    _, edges, lo, hi = _grid(density, per_axis)
    probes = [0.5 * (lo + hi)]
    for b in density.domain.boxes:
        corners = np.array(np.meshgrid(*[[a, c] for a, c in zip(b.lo, b.hi)], indexing="ij")).reshape(b.dim, -1).T
        probes.append(corners)
    probes = np.concatenate(probes)
    probes = probes[density.domain.contains(probes)]
    dist, _ = cKDTree(sample.points).query(probes)
    i = int(np.argmax(dist))
    return float(dist[i]), probes[i]


def lower_bound_certificate(
    density: Density, sample: EmpiricalMeasure, mesh_exponent: int = 5, probes_per_axis: int | None = None
) -> LowerBoundCertificate:
    """Largest certified r from two witnesses.

    Mass witness: unions A of grid cells with the largest excess nu_n - nu
    and radii on a geometric schedule; nu(A^r) is over-estimated by the
    mass of the cells within floor(r/h) + 1 cells of A.
    Empty-ball witness: the support point farthest from the sample; any
    coupling must carry the mass near it at least that far.
    """
    m = 2**mesh_exponent
    if m > MAX_MESH:
        raise ValueError(f"mesh too fine: 2^l must not exceed {MAX_MESH}")
    d = density.dim
    n = sample.n
    bb, edges, lo, hi = _grid(density, m)
    shape = (m,) * d
    h = float(min(e[1] - e[0] for e in edges))
    nu = density.mass(lo, hi).reshape(shape)
    idx = tuple(np.clip(np.searchsorted(e, sample.points[:, j], side="left") - 1, 0, m - 1) for j, e in enumerate(edges))
    counts = np.zeros(shape)
    np.add.at(counts, idx, 1.0)
    nu_n = counts / n
    excess = (nu_n - nu).ravel()
    order = np.argsort(-excess, kind="stable")
    positive = int(np.sum(excess > 0))
    best = LowerBoundCertificate(0.0, "none")
    sizes = sorted({1 << k for k in range(0, max(1, positive).bit_length())} | {positive}) if positive else []
    diam = density.domain.diameter()
    radii = h * 2.0 ** (np.arange(0, 64) / 2.0)
    radii = radii[radii < diam]
    for size in sizes:
        cells = order[:size]
        mask = np.zeros(m**d, dtype=bool)
        mask[cells] = True
        mask = mask.reshape(shape)
        mass_n = float(nu_n[mask].sum())
        # certified radii form an initial segment of the schedule
        grown = mask
        grown_k = 0
        struct = np.ones((3,) * d, dtype=bool)
        for r in radii:
            k = int(math.floor(r / h)) + 1
            if k > grown_k:
                grown = ndimage.binary_dilation(grown, structure=struct, iterations=k - grown_k)
                grown_k = k
            enlarged = float(nu[grown].sum())
            if not mass_n > enlarged + MASS_TOL:
                break
            if r > best.r:
                best = LowerBoundCertificate(
                    float(r), "mass", [[lo[c].tolist(), hi[c].tolist()] for c in cells], mass_n, enlarged
                )
    q = probes_per_axis or (min(512, 4 * m) if d == 2 else min(96, 2 * m))
    r_ball, center = _empty_ball(density, sample, q)
    if r_ball > best.r:
        best = LowerBoundCertificate(r_ball, "empty-ball", [], 0.0, 0.0, center.tolist())
    return best
