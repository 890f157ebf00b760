"""Vector fields used in the experiments.

Every field is evaluated on batches: ``field(x, u)`` takes ``x`` of shape
(B, d) and ``u`` of shape (B, n) (or None for autonomous systems) and
returns (B, d).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .net import Network, forward_value


class EquilibriumError(RuntimeError):
    pass


@dataclass
class DynamicalSystem:
    name: str
    dim: int
    field: Callable
    lower: np.ndarray
    upper: np.ndarray
    equilibrium: np.ndarray
    control_dim: int = 0
    lipschitz_bound: Optional[float] = None
    # d f / d u, shape (B, d, n); finite differences when missing
    control_jac: Optional[Callable] = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        self.equilibrium = np.asarray(self.equilibrium, dtype=np.float64)
        for arr, nm in ((self.lower, "lower"), (self.upper, "upper"), (self.equilibrium, "equilibrium")):
            if arr.shape != (self.dim,):
                raise ValueError(f"{nm} must have shape ({self.dim},)")
        if np.any(self.lower >= self.upper):
            raise ValueError("domain lower bound must be below upper bound")

    def f(self, x, u=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.dim:
            raise ValueError(f"state has shape {x.shape}, system dimension is {self.dim}")
        if self.control_dim:
            if u is None:
                u = np.zeros((xb.shape[0], self.control_dim))
            u = np.asarray(u, dtype=np.float64).reshape(xb.shape[0], self.control_dim)
            out = self.field(xb, u)
        else:
            out = self.field(xb, None)
        return out[0] if single else out

    def dfdu(self, x, u) -> np.ndarray:
        if self.control_jac is not None:
            return self.control_jac(x, u)
        h = 1e-6
        cols = []
        for j in range(self.control_dim):
            e = np.zeros(self.control_dim)
            e[j] = h
            cols.append((self.field(x, u + e) - self.field(x, u - e)) / (2 * h))
        return np.stack(cols, axis=2)

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lower) & (x <= self.upper), axis=1)


@dataclass
class ControlLaw:
    """u(x) = net(x), optionally squashed to [-saturation, saturation] by tanh."""

    net: Network
    saturation: Optional[float] = None
    train_bias: bool = True

    def __call__(self, x) -> np.ndarray:
        z = forward_value(self.net, x)
        if self.saturation is not None:
            return self.saturation * np.tanh(z)
        return z

    def output_jac(self, z):
        """du/dz for pre-saturation outputs z."""
        if self.saturation is not None:
            return self.saturation * (1.0 - np.tanh(z) ** 2)
        return np.ones_like(z)

    def to_dict(self) -> dict:
        return {"network": self.net.to_dict(), "saturation": self.saturation,
                "train_bias": self.train_bias}

    @classmethod
    def from_dict(cls, data: dict) -> "ControlLaw":
        return cls(Network.from_dict(data["network"]), data.get("saturation"),
                   bool(data.get("train_bias", True)))


def closed_loop(system: DynamicalSystem, control: ControlLaw) -> DynamicalSystem:
    if control.net.in_dim != system.dim or control.net.out_dim != system.control_dim:
        raise ValueError("control law dimensions do not match the system")

    def field(x, _u=None):
        return system.field(x, control(x))

    return DynamicalSystem(f"{system.name}+control", system.dim, field, system.lower,
                           system.upper, system.equilibrium, 0, None)


def curve_tracking(e=0.15, rho0=1.0, mu=6.42, lower=None, upper=None,
                   equilibrium="refined") -> DynamicalSystem:
    """Curve-tracking field in (rho, phi) coordinates.

    With the default constants the field vanishes at (rho0 - e, 0), not at
    (rho0, 0); ``equilibrium="nominal"`` forces (rho0, 0) anyway.
    """

    def field(x, _u=None):
        rho, ph = x[:, 0], x[:, 1]
        return np.stack([-np.sin(ph), (rho - rho0) * np.cos(ph) - mu * np.sin(ph) + e], axis=1)

    lower = np.array([rho0 - 1.0, -np.pi / 2]) if lower is None else lower
    upper = np.array([rho0 + 1.0, np.pi / 2]) if upper is None else upper
    sys = DynamicalSystem("curve_tracking", 2, field, lower, upper, [rho0, 0.0])
    if equilibrium == "nominal":
        return sys
    if equilibrium == "refined":
        sys.equilibrium = refine_equilibrium(sys, [rho0, 0.0])
    else:
        sys.equilibrium = np.asarray(equilibrium, dtype=np.float64)
    return sys


def pendulum(g=9.82, length=0.5, mass=0.15, friction=0.1, lower=None, upper=None) -> DynamicalSystem:
    """Inverted pendulum, state (theta, theta_dot), torque input u."""
    inertia = mass * length ** 2

    def field(x, u):
        th, om = x[:, 0], x[:, 1]
        acc = (mass * g * length * np.sin(th) - friction * om + u[:, 0]) / inertia
        return np.stack([om, acc], axis=1)

    def control_jac(x, u):
        jac = np.zeros((x.shape[0], 2, 1))
        jac[:, 1, 0] = 1.0 / inertia
        return jac

    lower = np.array([-np.pi, -8.0]) if lower is None else lower
    upper = np.array([np.pi, 8.0]) if upper is None else upper
    return DynamicalSystem("pendulum", 2, field, lower, upper, [0.0, 0.0], control_dim=1,
                           control_jac=control_jac)


def linear(matrix, lower=None, upper=None, name="linear") -> DynamicalSystem:
    """x' = A x; handy for analytic checks."""
    A = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    d = A.shape[0]

    def field(x, _u=None):
        return x @ A.T

    lower = -np.ones(d) if lower is None else lower
    upper = np.ones(d) if upper is None else upper
    return DynamicalSystem(name, d, field, lower, upper, np.zeros(d),
                           lipschitz_bound=float(np.linalg.norm(A, 2)))


def synthetic(dim: int, seed: int = 0, lower=None, upper=None) -> DynamicalSystem:
    """f(x) = -D x + eps * B tanh(C x), globally asymptotically stable.

    D is diagonal in [0.5, 2]; ||B|| = ||C|| = 1 so the coupling is
    1-Lipschitz, and eps = 0.25 min(D) keeps the linear part dominant.
    """
    if dim < 1:
        raise ValueError("dim must be positive")
    rng = np.random.default_rng(seed)
    diag = rng.uniform(0.5, 2.0, size=dim)
    Bm = rng.standard_normal((dim, dim))
    Cm = rng.standard_normal((dim, dim))
    Bm /= np.linalg.norm(Bm, 2)
    Cm /= np.linalg.norm(Cm, 2)
    eps = 0.25 * diag.min()

    def field(x, _u=None):
        return -x * diag + eps * np.tanh(x @ Cm.T) @ Bm.T

    lower = -np.ones(dim) if lower is None else lower
    upper = np.ones(dim) if upper is None else upper
    return DynamicalSystem(f"synthetic{dim}", dim, field, lower, upper, np.zeros(dim),
                           lipschitz_bound=float(diag.max() + eps))


def block_concat(base: DynamicalSystem, copies: int) -> DynamicalSystem:
    """Stack ``copies`` independent copies of an autonomous system."""
    if copies < 1:
        raise ValueError("copies must be at least 1")
    if base.control_dim:
        raise ValueError("block_concat needs an autonomous system")
    d = base.dim

    def field(x, _u=None):
        return np.concatenate([base.field(x[:, i * d:(i + 1) * d], None) for i in range(copies)], axis=1)

    return DynamicalSystem(f"{base.name}x{copies}", d * copies, field,
                           np.tile(base.lower, copies), np.tile(base.upper, copies),
                           np.tile(base.equilibrium, copies), 0, base.lipschitz_bound)


def _fd_jacobian(func, x, h=1e-7):
    d = x.size
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h * max(1.0, abs(x[j]))
        cols.append((func(x + e) - func(x - e)) / (2 * e[j]))
    return np.stack(cols, axis=1)


def refine_equilibrium(system: DynamicalSystem, guess, tol=1e-10, max_iter=100) -> np.ndarray:
    """Damped Newton on f(x) = 0 (control held at zero)."""
    x = np.asarray(guess, dtype=np.float64).copy()
    func = lambda z: system.f(z)
    r = func(x)
    for _ in range(max_iter):
        res = np.linalg.norm(r)
        if res <= tol:
            return x
        J = _fd_jacobian(func, x)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            step = -r
        t = 1.0
        while t > 1e-8:
            cand = x + t * step
            rc = func(cand)
            if np.linalg.norm(rc) < res:
                break
            t *= 0.5
        x, r = cand, rc
    res = np.linalg.norm(r)
    if res <= tol:
        return x
    raise EquilibriumError(f"equilibrium refinement did not converge: residual {res:.3e} at {x}")


def estimate_lipschitz(system: DynamicalSystem, samples: int = 2000, seed: int = 0,
                       control: Optional[ControlLaw] = None) -> float:
    """Empirical (lower-bound) Lipschitz constant of f on the domain.

    Max of difference quotients over random pairs and of Jacobian spectral
    norms (finite differences) at the sample points. Point sets for a larger
    ``samples`` extend those for a smaller one, so the estimate never drops.
    """
    sys = closed_loop(system, control) if control is not None else system
    if sys.control_dim:
        # zero control
        base = sys
        sys = replace(sys, control_dim=0,
                      field=lambda x, _u=None: base.field(x, np.zeros((x.shape[0], base.control_dim))))
    ss = np.random.SeedSequence(seed)
    r1, r2 = (np.random.default_rng(s) for s in ss.spawn(2))
    span = sys.upper - sys.lower
    x = sys.lower + span * r1.random((samples, sys.dim))
    y = sys.lower + span * r2.random((samples, sys.dim))
    fx, fy = sys.f(x), sys.f(y)
    dist = np.linalg.norm(x - y, axis=1)
    ok = dist > 0
    best = float(np.max(np.linalg.norm(fx - fy, axis=1)[ok] / dist[ok])) if ok.any() else 0.0
    h = 1e-6 * np.max(span)
    jac = np.empty((samples, sys.dim, sys.dim))
    for j in range(sys.dim):
        e = np.zeros(sys.dim)
        e[j] = h
        jac[:, :, j] = (sys.f(x + e) - sys.f(x - e)) / (2 * h)
    best = max(best, float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2)))))
    if system.lipschitz_bound is None and control is None:
        system.lipschitz_bound = best
    return best
