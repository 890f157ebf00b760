"""Grid-plus-Lipschitz certification of delta-accurate Lyapunov functions.

The check: every grid point x satisfies DV(x).f(x) <= -gamma_bar ||x - x*||,
DV.f is M-Lipschitz, and the grid covers Omega_delta with balls of radius
c ||x - x*||. Then DV.f < 0 on all of Omega_delta provided c < gamma_bar / M.

Two grids are available. ``kind="lemma"`` is the radial-shell grid with
coordinates ``+-r_j``, r_j = (1+c)^(j-1) delta/sqrt(d). It leaves uncovered
slivers next to the coordinate hyperplanes (points with a coordinate below
r_1), so it is kept for reference. ``kind="covering"`` (the default used by
``certify``) uses shells with ratio 1 + c/sqrt(2) plus a uniform band of
coordinates inside (-r_1, r_1), which provably covers Omega_delta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional

import numpy as np

from .dynamics import DynamicalSystem
from .model import Augmentation, LyapunovNet, Psi
from .net import derivative_bounds, forward_value
from .risk import certificate_residuals, hinge_args, sample_uniform

DEFAULT_BUDGET = 10_000_000


class GridBudgetError(ValueError):
    def __init__(self, required: int, budget: int):
        super().__init__(f"certification grid needs {required} points, budget is {budget}; "
                         "increase delta or c, or fall back to a Monte-Carlo audit")
        self.required = required
        self.budget = budget


class Verdict(str, Enum):
    CERTIFIED = "certified"
    GRID_FAIL = "grid_fail"
    MARGIN_FAIL = "margin_fail"


class MMethod(str, Enum):
    ANALYTIC = "analytic"
    EMPIRICAL = "empirical"


def shell_count(d: int, delta: float, c: float, extent: float = 1.0) -> int:
    """Number of shells r_1 < ... < r_k <= extent < r_{k+1}."""
    r1 = delta / math.sqrt(d)
    return int(math.floor(math.log(extent / r1) / math.log1p(c))) + 1


@dataclass
class CertGrid:
    delta: float
    c: float
    k: int
    kind: str
    axis_values: list            # per-coordinate offsets from the center
    center: np.ndarray
    min_norm: float = 0.0        # offsets with smaller norm are skipped

    @property
    def d(self) -> int:
        return len(self.axis_values)

    @property
    def radii(self) -> np.ndarray:
        return self.delta / math.sqrt(self.d) * (1.0 + self.c) ** np.arange(self.k)

    @property
    def count(self) -> int:
        """Size of the enumerated product set (before ``min_norm`` filtering)."""
        return int(np.prod([len(a) for a in self.axis_values], dtype=object))

    def iter_points(self, chunk: int = 1 << 17) -> Iterator[np.ndarray]:
        shape = tuple(len(a) for a in self.axis_values)
        total = self.count
        for start in range(0, total, chunk):
            idx = np.unravel_index(np.arange(start, min(start + chunk, total)), shape)
            off = np.stack([a[i] for a, i in zip(self.axis_values, idx)], axis=1)
            if self.min_norm > 0:
                off = off[np.linalg.norm(off, axis=1) >= self.min_norm]
            if off.size:
                yield self.center + off

    @property
    def points(self) -> np.ndarray:
        parts = list(self.iter_points())
        return np.concatenate(parts) if parts else np.empty((0, self.d))


def _extents(d, center, lower, upper):
    center = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)
    lower = -np.ones(d) if lower is None else np.asarray(lower, dtype=np.float64)
    upper = np.ones(d) if upper is None else np.asarray(upper, dtype=np.float64)
    return center, center - lower, upper - center


def build_grid(d: int, delta: float, c: float, budget: int = DEFAULT_BUDGET,
               center=None, lower=None, upper=None) -> CertGrid:
    """Radial-shell grid with all sign patterns, (2k)^d points on [-1, 1]^d.

    For a general box the shells run up to the largest extent from ``center``
    and values outside the box on a given side are dropped.
    """
    if not (0 < delta < 1 and 0 < c < 1):
        raise ValueError("delta and c must lie in (0, 1)")
    if d < 1:
        raise ValueError("dimension must be positive")
    center, below, above = _extents(d, center, lower, upper)
    k = shell_count(d, delta, c, float(max(below.max(), above.max())))
    r = delta / math.sqrt(d) * (1.0 + c) ** np.arange(k)
    axes = [np.concatenate([-r[r <= below[j]][::-1], r[r <= above[j]]]) for j in range(d)]
    grid = CertGrid(delta, c, k, "lemma", axes, center)
    if grid.count > budget:
        raise GridBudgetError(grid.count, budget)
    return grid


def build_covering_grid(d: int, delta: float, c: float, budget: int = DEFAULT_BUDGET,
                        center=None, lower=None, upper=None) -> CertGrid:
    """Grid whose balls B(x; c||x - center||) cover the box minus B(center; delta).

    Coordinates of y with |y_j| >= r_1 snap down to shells of ratio
    1 + c/sqrt(2), costing at most (c^2/2)||x||^2 in total. The remaining
    coordinates snap to a uniform band in (-r_1, r_1) whose half-spacing is
    small enough that their error fits in the other half of the c^2 ||x||^2
    budget (at least one coordinate is a shell coordinate, since ||y|| >= delta).
    """
    if not (0 < delta < 1 and 0 < c < 1):
        raise ValueError("delta and c must lie in (0, 1)")
    center, below, above = _extents(d, center, lower, upper)
    r1 = delta / math.sqrt(d)
    if min(below.min(), above.min()) < r1:
        raise ValueError("the box must extend at least delta/sqrt(d) from the center on every side")
    cs = c / math.sqrt(2.0)
    k = shell_count(d, delta, cs, float(max(below.max(), above.max())))
    r = r1 * (1.0 + cs) ** np.arange(k)
    band = np.empty(0)
    if d > 1:
        half = c * delta / ((1.0 + cs) * math.sqrt(2.0 * d * (d - 1)))
        n_band = int(math.ceil(r1 / half))
        band = -r1 + (np.arange(n_band) + 0.5) * (2.0 * r1 / n_band)
    axes = [np.concatenate([-r[r <= below[j]][::-1], band, r[r <= above[j]]]) for j in range(d)]
    grid = CertGrid(delta, c, k, "covering", axes, center, min_norm=delta / (1.0 + c))
    if grid.count > budget:
        raise GridBudgetError(grid.count, budget)
    return grid


def covering_failures(grid: CertGrid, y: np.ndarray, chunk: int = 512) -> int:
    """Brute force: how many y have no grid x with ||x - y|| <= c ||x - center||."""
    pts = grid.points
    off = np.linalg.norm(pts - grid.center, axis=1) * grid.c
    bad = 0
    for part in np.array_split(y, max(1, len(y) // chunk)):
        dist = np.sqrt(np.maximum(
            np.sum(part * part, 1)[:, None] - 2.0 * part @ pts.T + np.sum(pts * pts, 1)[None, :], 0.0))
        bad += int(np.count_nonzero(~np.any(dist <= off[None, :] * (1 + 1e-12), axis=1)))
    return bad


@dataclass
class AccuracyBudget:
    gamma: float
    eps: float
    lipschitz_f: float
    a_gamma_eps: float
    eps_admissible: bool
    eps_max: float


def accuracy_budget(gamma: float, eps: float, lipschitz_f: float, d: int = 1) -> AccuracyBudget:
    """Margin gamma - eps * L_f left after an eps-accurate approximation."""
    if gamma <= 0 or eps <= 0:
        raise ValueError("gamma and eps must be positive")
    if lipschitz_f <= 0:
        raise ValueError("L_f must be positive (a zero field is degenerate)")
    eps_max = gamma / (math.sqrt(d) * lipschitz_f)
    a = gamma - eps * lipschitz_f
    return AccuracyBudget(gamma, eps, lipschitz_f, a, bool(eps < eps_max and a > 0), eps_max)


def _g(model, system, x):
    return hinge_args(model, system, x, 0.0)


def lipschitz_bound_M(model: LyapunovNet, system: DynamicalSystem, method=MMethod.ANALYTIC,
                      samples: int = 100_000, seed: int = 0, inner_radius: float = 0.0) -> float:
    """Lipschitz constant of x -> DV(x).f(x) on the domain.

    ``analytic``: chained operator-norm bounds (interval bounds on the
    pre-activations) combined as sup||D^2V f|| + sup||DV|| L_f.
    ``empirical``: largest finite-difference slope over jittered neighbours
    and random pairs outside B(x*; inner_radius).
    """
    method = MMethod(method)
    if model.dim != system.dim:
        raise ValueError("model and system dimensions differ")
    if method is MMethod.EMPIRICAL:
        return _empirical_M(model, system, samples, seed, inner_radius)
    if system.lipschitz_bound is None:
        raise ValueError("analytic M needs system.lipschitz_bound; call estimate_lipschitz first")
    Lf = float(system.lipschitz_bound)
    rng_phi, G, H = derivative_bounds(model.phi, system.lower, system.upper)
    corner = np.maximum(np.abs(system.upper - model.equilibrium), np.abs(system.lower - model.equilibrium))
    R = float(np.linalg.norm(corner))
    F = Lf * R
    a = model.alpha_bar
    if model.psi is Psi.ABS:
        dpsi, d2psi = G, H
    elif model.psi is Psi.SQUARE:
        dpsi, d2psi = 2.0 * rng_phi * G, 2.0 * G * G + 2.0 * rng_phi * H
    else:
        dpsi, d2psi = G, G * G / model.huber_delta + H
    if model.augmentation is Augmentation.NORM:
        daug, d2aug_f = a, a * Lf
    elif model.augmentation is Augmentation.SQNORM:
        daug, d2aug_f = 2.0 * a * R, 2.0 * a * Lf * R
    else:
        daug, d2aug_f = a, a * Lf
    return float(d2psi * F + d2aug_f + (dpsi + daug) * Lf)


def _empirical_M(model, system, samples, seed, inner_radius):
    rng = np.random.default_rng(seed)
    lo, hi, eq = system.lower, system.upper, model.equilibrium
    x = sample_uniform(lo, hi, samples, inner_radius, eq, rng).points
    scale = float(np.max(hi - lo))
    dirs = rng.standard_normal(x.shape)
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    best = 0.0
    gx = _g(model, system, x)
    for h in (1e-3 * scale, 1e-5 * scale):
        y = np.clip(x + h * dirs, lo, hi)
        dist = np.linalg.norm(y - x, axis=1)
        ok = dist > 0
        best = max(best, float(np.max(np.abs(_g(model, system, y[ok]) - gx[ok]) / dist[ok])))
    y = x[rng.permutation(len(x))]
    dist = np.linalg.norm(y - x, axis=1)
    ok = dist > 0
    if ok.any():
        best = max(best, float(np.max(np.abs(_g(model, system, y[ok]) - gx[ok]) / dist[ok])))
    return best


@dataclass
class Certificate:
    delta: float
    c: float
    gamma_bar: float
    M: float
    M_method: str
    M_raw: float
    grid_kind: str
    grid_k: int
    grid_count: int
    grid_checked: int
    grid_max_residual: float
    margin: float
    verdict: Verdict
    mc_n: int = 0
    mc_violations: int = 0
    psi_sign_change: bool = False
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "delta": float(self.delta),
            "c": float(self.c),
            "gamma_bar": float(self.gamma_bar),
            "M": {"value": float(self.M), "method": self.M_method, "raw": float(self.M_raw)},
            "grid": {"k": int(self.grid_k), "count": int(self.grid_count), "checked": int(self.grid_checked),
                     "kind": self.grid_kind},
            "grid_max_residual": float(self.grid_max_residual),
            "margin": float(self.margin),
            "verdict": self.verdict.value,
            "mc_audit": {"n": int(self.mc_n), "violations": int(self.mc_violations)},
            "psi_sign_change": bool(self.psi_sign_change),
            "notes": list(self.notes),
        }


def mc_audit(model: LyapunovNet, system: DynamicalSystem, delta: float, n: int = 100_000,
             seed: int = 1, chunk: int = 200_000) -> tuple[int, int]:
    """Count points of Omega_delta with DV.f >= 0."""
    rng = np.random.default_rng(seed)
    bad, done = 0, 0
    while done < n:
        m = min(chunk, n - done)
        x = sample_uniform(system.lower, system.upper, m, delta, model.equilibrium, rng).points
        bad += int(np.count_nonzero(_g(model, system, x) >= 0.0))
        done += m
    return n, bad


def certify(model: LyapunovNet, system: DynamicalSystem, delta: float, c: float, gamma_bar: float,
            M_method=MMethod.ANALYTIC, *, grid_kind: str = "covering", budget: int = DEFAULT_BUDGET,
            mc_points: int = 100_000, M_samples: int = 100_000, safety: float = 1.5,
            seed: int = 0) -> Certificate:
    """Check the grid residual, compute M and the margin, and audit by sampling."""
    if system.control_dim:
        raise ValueError("certify needs an autonomous (closed-loop) system")
    builder = build_covering_grid if grid_kind == "covering" else build_grid
    grid = builder(system.dim, delta, c, budget, model.equilibrium, system.lower, system.upper)

    M_method = MMethod(M_method)
    # segments between a grid point and the points it covers stay this far from x*
    inner = (1.0 - c) * delta / (1.0 + c)
    M_raw = lipschitz_bound_M(model, system, M_method, M_samples, seed, inner)
    M = M_raw * safety if M_method is MMethod.EMPIRICAL else M_raw

    phi_star = forward_value(model.phi, model.equilibrium)[0]
    worst, checked, has_pos, has_neg = -np.inf, 0, False, False
    for pts in grid.iter_points():
        res = certificate_residuals(model, system, pts, gamma_bar)
        worst = max(worst, float(np.max(res)))
        checked += len(pts)
        if model.psi is Psi.ABS:
            s = forward_value(model.phi, pts)[:, 0] - phi_star
            has_pos |= bool(np.any(s > 0))
            has_neg |= bool(np.any(s < 0))

    # ||x - x*|| >= delta / (1 + c) for covering-grid points that cover anything
    scale = delta if grid.kind == "lemma" else delta / (1.0 + c)
    margin = (gamma_bar - M * c) * scale
    notes = []
    sign_change = has_pos and has_neg
    if worst > 0:
        verdict = Verdict.GRID_FAIL
    elif not (c < gamma_bar / M and margin > 0):
        verdict = Verdict.MARGIN_FAIL
    elif sign_change:
        verdict = Verdict.MARGIN_FAIL
        notes.append("phi - phi(x*) changes sign on the grid: DV is discontinuous there, "
                     "so no finite Lipschitz constant exists")
    else:
        verdict = Verdict.CERTIFIED
    if grid.kind == "lemma":
        notes.append("lemma grid does not cover points with a coordinate below delta/sqrt(d)")
    n, bad = mc_audit(model, system, delta, mc_points, seed + 1) if mc_points else (0, 0)
    return Certificate(delta, c, gamma_bar, M, M_method.value, M_raw, grid.kind, grid.k, grid.count,
                       checked, worst, margin, verdict, n, bad, sign_change, notes)


def max_certifiable_c(gamma_bar: float, M: float) -> float:
    return gamma_bar / M


@dataclass
class MarginChoice:
    gamma_bar: float
    c: float
    M: float
    probe_min_rate: float


def suggest_margins(model: LyapunovNet, system: DynamicalSystem, delta: float, probe: int = 100_000,
                    fraction: float = 0.8, share: float = 0.9, safety: float = 1.5,
                    M_samples: int = 100_000, seed: int = 0) -> MarginChoice:
    """Pick (gamma_bar, c) for ``certify`` from a sampled probe of the model.

    gamma_bar is ``fraction`` of the smallest observed decay rate
    -DV.f / ||x - x*|| on Omega_delta, and c is ``share`` of gamma_bar / M
    with the empirical M inflated by ``safety``. Nothing here is a proof;
    the grid check in ``certify`` is what decides.
    """
    rng = np.random.default_rng(seed)
    x = sample_uniform(system.lower, system.upper, probe, delta, model.equilibrium, rng).points
    rate = -_g(model, system, x) / np.linalg.norm(x - model.equilibrium, axis=1)
    low = float(rate.min())
    if low <= 0:
        raise ValueError(f"the probe found DV.f >= 0 on Omega_delta (min rate {low:.3e}); nothing to certify")
    gamma_bar = fraction * low
    inner = delta / 2.0
    M = safety * lipschitz_bound_M(model, system, MMethod.EMPIRICAL, M_samples, seed + 1, inner)
    c = min(share * gamma_bar / M, 0.5)
    return MarginChoice(gamma_bar, c, M, low)
