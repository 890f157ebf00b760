"""RK4 simulation and level-set region-of-attraction estimates (2d)."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .dynamics import DynamicalSystem
from .model import LyapunovNet, lyap_directional, lyap_eval


class IntegrationError(RuntimeError):
    def __init__(self, msg, trajectory):
        super().__init__(msg)
        self.trajectory = trajectory


class UnsupportedDimension(ValueError):
    pass


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    reached_ball: bool
    exit: bool


def rk4_step(system: DynamicalSystem, x: np.ndarray, h: float) -> np.ndarray:
    """One classical Runge-Kutta step for a batch (B, d)."""
    k1 = system.f(x)
    k2 = system.f(x + 0.5 * h * k1)
    k3 = system.f(x + 0.5 * h * k2)
    k4 = system.f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check(system, h):
    if system.control_dim:
        raise ValueError("simulate the closed-loop system")
    if h <= 0:
        raise ValueError("step size must be positive")


def rk4_integrate(system: DynamicalSystem, x0, h: float = 0.01, t_max: float = 20.0,
                  delta_target: float = 0.0, center=None) -> Trajectory:
    """Integrate until t_max, entry into B(center; delta_target) or exit from the box."""
    _check(system, h)
    center = system.equilibrium if center is None else np.asarray(center, float)
    x = np.asarray(x0, dtype=np.float64).reshape(1, -1)
    if not system.contains(x)[0]:
        raise ValueError("initial state lies outside the domain")
    n_steps = int(round(t_max / h))
    times, states = [0.0], [x[0].copy()]
    reached = delta_target > 0 and np.linalg.norm(x[0] - center) <= delta_target
    left = False
    i = 0
    while not reached and i < n_steps:
        x = rk4_step(system, x, h)
        i += 1
        times.append(i * h)
        states.append(x[0].copy())
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state at t={i * h:.4g}",
                                   Trajectory(np.array(times), np.array(states), False, False))
        if not system.contains(x)[0]:
            left = True
            break
        reached = delta_target > 0 and np.linalg.norm(x[0] - center) <= delta_target
    return Trajectory(np.array(times), np.array(states), bool(reached), left)


def rk4_batch(system: DynamicalSystem, x0, h: float = 0.01, t_max: float = 20.0,
              delta_target: float = 0.05, center=None):
    """Vectorised integration of many starts; returns (reached, exited, t_hit)."""
    _check(system, h)
    center = system.equilibrium if center is None else np.asarray(center, float)
    x = np.array(x0, dtype=np.float64, ndmin=2)
    n = x.shape[0]
    reached = np.linalg.norm(x - center, axis=1) <= delta_target
    exited = ~system.contains(x)
    t_hit = np.where(reached, 0.0, np.inf)
    active = ~(reached | exited)
    n_steps = int(round(t_max / h))
    for i in range(1, n_steps + 1):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        xa = rk4_step(system, x[idx], h)
        x[idx] = xa
        bad = ~np.all(np.isfinite(xa), axis=1) | ~system.contains(xa)
        hit = ~bad & (np.linalg.norm(xa - center, axis=1) <= delta_target)
        exited[idx[bad]] = True
        reached[idx[hit]] = True
        t_hit[idx[hit]] = i * h
        active[idx[bad | hit]] = False
    return reached, exited, t_hit


@dataclass
class RoaEstimate:
    c_star: float
    valid_region_fraction: float
    area_fraction: float
    grid_resolution: tuple
    axes: list
    V: np.ndarray        # (n1, n2), indexed [i, j] -> (axes[0][i], axes[1][j])
    DVf: np.ndarray
    valid: np.ndarray
    in_roa: np.ndarray
    start: tuple


def _grid_eval(model, system, axes, chunk=1 << 16):
    X1, X2 = np.meshgrid(axes[0], axes[1], indexing="ij")
    pts = np.stack([X1.ravel(), X2.ravel()], axis=1)
    V = np.empty(len(pts))
    G = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        V[s:s + chunk], G[s:s + chunk] = lyap_directional(model, p, system.f(p))
    return pts, V.reshape(X1.shape), G.reshape(X1.shape)


def sublevel_component(V: np.ndarray, start, level: float) -> np.ndarray:
    """Cells of the 4-connected component of {V <= level} containing ``start``."""
    mask = V <= level
    if not mask[start]:
        return np.zeros_like(mask)
    labels, _ = ndimage.label(mask)
    return labels == labels[start]


def _bottleneck(V, bad, start):
    """Smallest c for which the component of {V <= c} around start reaches a bad cell."""
    n1, n2 = V.shape
    best = np.full(V.shape, np.inf)
    best[start] = V[start]
    heap = [(V[start], start)]
    while heap:
        c, (i, j) = heapq.heappop(heap)
        if c > best[i, j]:
            continue
        if bad[i, j]:
            return c
        for a, b in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if 0 <= a < n1 and 0 <= b < n2:
                nc = max(c, V[a, b])
                if nc < best[a, b]:
                    best[a, b] = nc
                    heapq.heappush(heap, (nc, (a, b)))
    return np.inf


def estimate_roa(model: LyapunovNet, system: DynamicalSystem, resolution: int = 201,
                 exempt_radius: float = 0.0) -> RoaEstimate:
    """Largest sublevel component around x* inside the valid region and the box.

    A cell is valid when DV.f < 0 there, or when it lies within
    ``exempt_radius`` of x* (the delta-ball a delta-accurate function may skip).
    Cells on the box boundary count as invalid, so the component stays inside.
    """
    if system.dim != 2 or model.dim != 2:
        raise UnsupportedDimension("grid ROA estimation needs a 2d system")
    if system.control_dim:
        raise ValueError("estimate the ROA of the closed-loop system")
    if resolution < 50:
        raise ValueError("resolution must be at least 50 per axis")
    axes = [np.linspace(system.lower[k], system.upper[k], resolution) for k in range(2)]
    pts, V, G = _grid_eval(model, system, axes)
    dist = np.linalg.norm(pts - model.equilibrium, axis=1).reshape(V.shape)
    start = tuple(int(np.argmin(np.abs(axes[k] - model.equilibrium[k]))) for k in range(2))
    exempt = dist <= exempt_radius
    exempt[start] = True
    valid = (G < 0) | exempt
    bad = ~valid
    bad[0, :] = bad[-1, :] = bad[:, 0] = bad[:, -1] = True
    cap = _bottleneck(V, bad, start)
    if np.isinf(cap):
        level = float(V.max())
    else:
        comp = sublevel_component(V, start, np.nextafter(cap, -np.inf))
        level = float(V[comp].max()) if comp.any() else 0.0
    in_roa = sublevel_component(V, start, level) if level > 0 else np.zeros_like(valid)
    c_star = max(level, 0.0) if in_roa.any() else 0.0
    return RoaEstimate(c_star, float(valid.mean()), float(in_roa.mean()), (resolution, resolution),
                       axes, V, G, valid, in_roa, start)


def sample_roa(model: LyapunovNet, system: DynamicalSystem, estimate: RoaEstimate, n: int,
               seed: int = 0) -> np.ndarray:
    """Uniform states of the box with V <= c* whose nearest grid cell is in the ROA component."""
    if estimate.c_star <= 0 or not estimate.in_roa.any():
        raise ValueError("the sublevel set {V <= c*} is empty")
    rng = np.random.default_rng(seed)
    lo, hi = system.lower, system.upper
    step = [(a[-1] - a[0]) / (len(a) - 1) for a in estimate.axes]
    out, have = [], 0
    while have < n:
        x = lo + (hi - lo) * rng.random((max(4 * n, 4096), 2))
        i = np.clip(np.rint((x[:, 0] - lo[0]) / step[0]).astype(int), 0, len(estimate.axes[0]) - 1)
        j = np.clip(np.rint((x[:, 1] - lo[1]) / step[1]).astype(int), 0, len(estimate.axes[1]) - 1)
        keep = x[estimate.in_roa[i, j] & (lyap_eval(model, x).v <= estimate.c_star)]
        out.append(keep)
        have += len(keep)
    return np.concatenate(out)[:n]


@dataclass
class RoaValidation:
    fraction: float
    starts: np.ndarray
    reached: np.ndarray
    exited: np.ndarray
    t_hit: np.ndarray


def validate_roa_detailed(model, system, estimate, n_starts=100, seed=0, delta_target=0.05,
                          t_max=20.0, h=0.01) -> RoaValidation:
    starts = sample_roa(model, system, estimate, n_starts, seed)
    reached, exited, t_hit = rk4_batch(system, starts, h, t_max, delta_target, model.equilibrium)
    ok = reached & ~exited
    return RoaValidation(float(ok.mean()), starts, reached, exited, t_hit)


def validate_roa(model: LyapunovNet, system: DynamicalSystem, estimate: RoaEstimate,
                 n_starts: int = 100, seed: int = 0, delta_target: float = 0.05,
                 t_max: float = 20.0, h: float = 0.01) -> float:
    """Fraction of starts in {V <= c*} that reach B(x*; delta_target) without leaving the box."""
    return validate_roa_detailed(model, system, estimate, n_starts, seed, delta_target, t_max, h).fraction
