"""Batch experiments: sample, build a transport, record upper and lower
bounds, fit the decay rate."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bounds import lower_bound_certificate
from .core import Density, EmpiricalMeasure, density_from_config, sample
from .domains import box_solver, build_wp, rebalance_and_recurse
from .multiscale import empirical_coupling_highd

CSV_COLUMNS = ["n", "seed", "upper", "lower", "escalated", "wall_ms"]
SCHEMES = ("highd", "hall2d", "auto")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    density: dict
    n_schedule: list[int]
    trials: int = 1
    scheme: str = "auto"
    seeds: list[int] | None = None
    base_seed: int = 0
    alpha: float = 3.0
    l_cfg: float = 1.0
    out: str = "results"
    mesh_exponent: int = 5
    record_timing: bool = True
    density_path: str | None = None

    def __post_init__(self):
        if not self.n_schedule:
            raise ConfigError("n_schedule is empty")
        if any(int(b) <= int(a) for a, b in zip(self.n_schedule, self.n_schedule[1:])):
            raise ConfigError("n_schedule must be strictly increasing")
        if any(int(n) < 1 for n in self.n_schedule):
            raise ConfigError("sample sizes must be positive")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")
        if self.seeds is not None and len(self.seeds) < self.trials:
            raise ConfigError("fewer seeds than trials")
        if not self.alpha > 2:
            raise ConfigError("alpha must exceed 2")

    def seed_for(self, n_index: int, trial: int) -> int:
        if self.seeds is not None:
            return int(self.seeds[trial])
        return int(self.base_seed + 1000 * n_index + trial)

    @classmethod
    def from_dict(cls, cfg: dict, base_dir: Path | None = None) -> ExperimentConfig:
        cfg = dict(cfg)
        dens = cfg.pop("density", None)
        path = None
        if isinstance(dens, str):
            path = dens
            p = Path(dens)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            dens = load_json(p)
        if not isinstance(dens, dict):
            raise ConfigError("density must be an object or a path to one")
        known = {f for f in cls.__dataclass_fields__}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown keys: {sorted(extra)}")
        try:
            return cls(density=dens, density_path=path, **cfg)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        return cls.from_dict(load_json(path), path.parent)


def load_json(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e


@dataclass
class TrialResult:
    n: int
    seed: int
    upper: float
    lower: float
    escalated: bool
    wall_ms: float
    error: str | None = None


def build_transport(density: Density, emp: EmpiricalMeasure, scheme: str, alpha: float, l_cfg: float):
    """The scheme's transport from ``density`` onto ``emp``."""
    d = density.dim
    if scheme == "auto":
        scheme = "hall2d" if d == 2 else "highd"
    if scheme == "hall2d" and d != 2:
        raise ConfigError("hall2d needs a planar density")
    multi = len(density.domain.boxes) > 1
    if multi:
        return rebalance_and_recurse(density, emp, build_wp(density.domain), alpha, l_cfg)
    box = density.domain.boxes[0]
    f = density.require_field()
    if scheme == "hall2d":
        return box_solver(f, box, emp.points, emp.n, alpha, l_cfg)
    t = empirical_coupling_highd(f, emp, alpha=alpha, box=box)
    t.info.setdefault("escalated", False)
    return t


def run_trial(density: Density, n: int, seed: int, cfg: ExperimentConfig) -> TrialResult:
    t0 = time.perf_counter()
    try:
        emp = sample(density, n, seed)
        tr = build_transport(density, emp, cfg.scheme, cfg.alpha, cfg.l_cfg)
        upper = tr.certified_bound
        lower = lower_bound_certificate(density, emp, cfg.mesh_exponent).r
        esc = bool(tr.info.get("escalated", False))
        err = None
    except Exception as e:  # a failed trial is recorded, the run goes on
        upper, lower, esc, err = math.nan, math.nan, False, f"{type(e).__name__}: {e}"
    ms = (time.perf_counter() - t0) * 1000.0 if cfg.record_timing else 0.0
    return TrialResult(n, seed, upper, lower, esc, ms, err)


@dataclass
class RateFit:
    exponent: float
    intercept: float
    log_correction_exponent: float
    residual_slope: float
    medians: list[tuple[int, float]] = field(default_factory=list)


def correction_exponent(d: int) -> float:
    return 0.75 if d == 2 else 1.0 / d


def target_exponent(d: int) -> float:
    return -0.5 if d == 2 else -1.0 / d


def fit_rate(medians: list[tuple[int, float]], d: int) -> RateFit:
    """Least squares of log(value / (ln n)^c) on log n.

    ``residual_slope`` is the fitted exponent minus the expected one, so it
    is 0 when values follow (ln n)^c n^{-theta} exactly.
    """
    if len(medians) < 3:
        raise ValueError("need at least 3 points to fit a rate")
    n = np.array([m[0] for m in medians], dtype=float)
    v = np.array([m[1] for m in medians], dtype=float)
    if np.any(n < 2) or np.any(v <= 0):
        raise ValueError("rate fit needs n >= 2 and positive values")
    c = correction_exponent(d)
    x = np.log(n)
    y = np.log(v) - c * np.log(np.log(n))
    slope, intercept = np.polyfit(x, y, 1)
    return RateFit(float(slope), float(intercept), c, float(slope - target_exponent(d)), [(int(a), float(b)) for a, b in medians])


def format_csv(rows: list[TrialResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in sorted(rows, key=lambda r: (r.n, r.seed)):
        w.writerow([r.n, r.seed, repr(r.upper), repr(r.lower), int(r.escalated), f"{r.wall_ms:.3f}"])
    return buf.getvalue()


def read_csv(path: str | Path) -> list[TrialResult]:
    out = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != CSV_COLUMNS:
            raise ConfigError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
        for row in rd:
            out.append(
                TrialResult(int(row["n"]), int(row["seed"]), float(row["upper"]), float(row["lower"]), row["escalated"] == "1", float(row["wall_ms"]))
            )
    return out


def medians_by_n(rows: list[TrialResult], key: str = "upper") -> list[tuple[int, float]]:
    out = []
    for n in sorted({r.n for r in rows}):
        vals = [getattr(r, key) for r in rows if r.n == n and math.isfinite(getattr(r, key))]
        if vals:
            out.append((n, float(np.median(vals))))
    return out


PLOT_SCRIPT = """\
# Plot the median bounds against n on log-log axes.
# Usage: python plot_medians.py   (needs matplotlib)
import csv
import statistics
from collections import defaultdict

import matplotlib.pyplot as plt

upper = defaultdict(list)
lower = defaultdict(list)
with open("trials.csv") as fh:
    for row in csv.DictReader(fh):
        if row["upper"] != "nan":
            upper[int(row["n"])].append(float(row["upper"]))
            lower[int(row["n"])].append(float(row["lower"]))
ns = sorted(upper)
plt.loglog(ns, [statistics.median(upper[n]) for n in ns], "o-", label="upper")
plt.loglog(ns, [statistics.median(lower[n]) for n in ns], "s-", label="lower")
plt.xlabel("n")
plt.ylabel("d_inf")
plt.legend()
plt.savefig("medians.png", dpi=150)
"""


@dataclass
class ExperimentResult:
    rows: list[TrialResult]
    fit: RateFit | None
    failures: int
    out_dir: Path

    @property
    def escalation_rate(self) -> float:
        ok = [r for r in self.rows if r.error is None]
        return sum(r.escalated for r in ok) / max(1, len(ok))


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    density = density_from_config(cfg.density)
    rows = []
    for i, n in enumerate(cfg.n_schedule):
        for t in range(cfg.trials):
            rows.append(run_trial(density, int(n), cfg.seed_for(i, t), cfg))
    rows.sort(key=lambda r: (r.n, r.seed))
    med = medians_by_n(rows)
    fit = fit_rate(med, density.dim) if len(med) >= 3 and all(n >= 2 for n, _ in med) else None
    failures = sum(r.error is not None for r in rows)
    out = Path(cfg.out)
    res = ExperimentResult(rows, fit, failures, out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "trials.csv").write_text(format_csv(rows))
        summary = {
            "dimension": density.dim,
            "scheme": cfg.scheme,
            "alpha": cfg.alpha,
            "l_cfg": cfg.l_cfg,
            "medians_upper": med,
            "medians_lower": medians_by_n(rows, "lower"),
            "rate_fit": asdict(fit) if fit else None,
            "escalation_rate": res.escalation_rate,
            "failures": [{"n": r.n, "seed": r.seed, "error": r.error} for r in rows if r.error],
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        (out / "plot_medians.py").write_text(PLOT_SCRIPT)
    return res
