"""Monte-Carlo empirical risks and uniform collocation sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import ControlLaw, DynamicalSystem
from .model import LyapunovNet, lyap_directional
from .net import Network, _as_batch, forward_directional, forward_value


@dataclass
class SampleSet:
    points: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    delta: float = 0.0
    seed: Optional[int] = None


@dataclass
class RiskValue:
    value: float
    violation_count: int
    max_violation: float


@dataclass
class RiskConfig:
    gamma: float = 0.1
    gamma_bar: float = 0.05
    dl_upper: float = 20.0
    dl_lower: float = 0.2
    n_samples: int = 100_000

    def __post_init__(self):
        if self.gamma <= 0 or self.gamma_bar <= 0:
            raise ValueError("gamma and gamma_bar must be positive")
        if self.gamma_bar > self.gamma:
            raise ValueError("gamma_bar must not exceed gamma")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")


def sample_uniform(lower, upper, n: int, delta: float = 0.0, center=None,
                   seed=0) -> SampleSet:
    """``n`` i.i.d. uniform points of the box, rejecting B(center; delta).

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if n < 1:
        raise ValueError("need at least one sample")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = lower.size
    center = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)
    if delta <= 0:
        pts = lower + (upper - lower) * rng.random((n, d))
        return SampleSet(pts, lower, upper, 0.0, None if isinstance(seed, np.random.Generator) else seed)

    out, have, tries = [], 0, 0
    while have < n:
        m = max(1024, 2 * (n - have))
        cand = lower + (upper - lower) * rng.random((m, d))
        keep = cand[np.linalg.norm(cand - center, axis=1) >= delta]
        tries += m
        if tries >= 10_000 and (have + len(keep)) / tries < 0.01:
            raise ValueError(f"delta={delta} excludes more than 99% of the domain")
        out.append(keep)
        have += len(keep)
    pts = np.concatenate(out)[:n]
    return SampleSet(pts, lower, upper, float(delta), None if isinstance(seed, np.random.Generator) else seed)


def _points(samples) -> np.ndarray:
    return samples.points if isinstance(samples, SampleSet) else np.asarray(samples, dtype=np.float64)


def _summary(h, squared=True) -> RiskValue:
    pos = np.maximum(h, 0.0)
    terms = pos * pos if squared else pos
    return RiskValue(float(np.sum(terms) / h.size), int(np.count_nonzero(h > 0)),
                     float(np.max(h)) if h.size else 0.0)


def hinge_args(model: LyapunovNet, system: DynamicalSystem, x, gamma: float,
               control: Optional[ControlLaw] = None) -> np.ndarray:
    """DV(x) . f(x, u(x)) + gamma ||x - x*|| per sample."""
    if system.dim != model.dim:
        raise ValueError(f"system dimension {system.dim} != model dimension {model.dim}")
    u = control(x) if control is not None else None
    _, orb = lyap_directional(model, x, system.f(x, u))
    return orb + gamma * np.linalg.norm(x - model.equilibrium, axis=1)


def risk_ln(model: LyapunovNet, system: DynamicalSystem, samples, cfg: RiskConfig) -> RiskValue:
    """Mean squared hinge of the orbital-derivative margin condition."""
    x, _ = _as_batch(model.phi, _points(samples))
    return _summary(hinge_args(model, system, x, cfg.gamma))


def risk_clf(model: LyapunovNet, system: DynamicalSystem, control: ControlLaw, samples,
             cfg: RiskConfig) -> RiskValue:
    if control.net.out_dim != system.control_dim or control.net.in_dim != system.dim:
        raise ValueError("control law dimensions do not match the system")
    x, _ = _as_batch(model.phi, _points(samples))
    return _summary(hinge_args(model, system, x, cfg.gamma, control))


def certificate_residuals(model: LyapunovNet, system: DynamicalSystem, x, gamma_bar: float) -> np.ndarray:
    """Unsquared residual DV . f + gamma_bar ||x - x*|| used by certification."""
    return hinge_args(model, system, np.atleast_2d(x), gamma_bar)


def _plain_eval(V, x, fx):
    """Values, orbital derivatives along ``fx`` and the anchor point."""
    if isinstance(V, LyapunovNet):
        v, orb = lyap_directional(V, x, fx)
        return v, orb, V.equilibrium
    val, q = forward_directional(V, x, fx)
    return val[:, 0], q[:, 0], np.zeros(V.in_dim)


def dl_terms(V: Network, system: DynamicalSystem, x, cfg: Optional[RiskConfig] = None):
    """Per-sample (orbital, upper, lower) hinge arguments of the DL risk.

    The bound hinges are positive when V leaves the band 0.2||x||^2 <= V <= 20||x||^2.
    """
    cfg = cfg or RiskConfig()
    v, orb, _ = _plain_eval(V, x, system.f(x))
    r2 = np.sum(x * x, axis=1)
    orb = orb + r2
    return orb, v - cfg.dl_upper * r2, cfg.dl_lower * r2 - v


def risk_dl(V: Network, system: DynamicalSystem, samples, cfg: Optional[RiskConfig] = None) -> RiskValue:
    """Three squared hinges: orbital decrease ||x||^2 and a 0.2/20 ||x||^2 sandwich."""
    net = V.phi if isinstance(V, LyapunovNet) else V
    x, _ = _as_batch(net, _points(samples))
    orb, up, lo = dl_terms(V, system, x, cfg)
    terms = np.maximum(orb, 0) ** 2 + np.maximum(up, 0) ** 2 + np.maximum(lo, 0) ** 2
    worst = np.maximum(np.maximum(orb, up), lo)
    return RiskValue(float(np.sum(terms) / x.shape[0]), int(np.count_nonzero(worst > 0)),
                     float(np.max(worst)))


def risk_nl(V, system: DynamicalSystem, samples) -> RiskValue:
    """V(0)^2 plus the mean of two unsquared hinges.

    Accepts a plain network or a ``LyapunovNet``; for the latter the anchor is
    the model equilibrium, where V vanishes by construction.
    """
    net = V.phi if isinstance(V, LyapunovNet) else V
    x, _ = _as_batch(net, _points(samples))
    v, orb, anchor = _plain_eval(V, x, system.f(x))
    if isinstance(V, LyapunovNet):
        v0 = 0.0
    else:
        v0 = float(forward_value(V, anchor)[0])
    terms = np.maximum(orb, 0.0) + np.maximum(-v, 0.0)
    worst = np.maximum(orb, -v)
    return RiskValue(float(v0 * v0 + np.sum(terms) / x.shape[0]), int(np.count_nonzero(worst > 0)),
                     float(np.max(worst)))
