"""Lyapunov-Net wrapper: V(x) = psi(phi(x) - phi(x*)) + alpha_bar * r(x - x*).

Positive definiteness holds for every parameter value, so training only has
to enforce the orbital-derivative condition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .net import Network, _as_batch, _forward_tape, backward, forward_directional, forward_joint, forward_value


class Augmentation(str, Enum):
    NORM = "norm"      # alpha ||x||
    SQNORM = "sqnorm"  # alpha ||x||^2
    LOGSQ = "logsq"    # alpha log(1 + ||x||^2)


class Psi(str, Enum):
    ABS = "abs"
    SQUARE = "square"
    HUBER = "huber"


@dataclass
class LyapEval:
    v: np.ndarray       # (B,)
    grad_v: np.ndarray  # (B, d)


@dataclass
class LyapunovNet:
    phi: Network
    alpha_bar: float = 0.5
    augmentation: Augmentation = Augmentation.NORM
    psi: Psi = Psi.ABS
    huber_delta: float = 1.0
    equilibrium: np.ndarray = field(default=None)

    def __post_init__(self):
        self.augmentation = Augmentation(self.augmentation)
        self.psi = Psi(self.psi)
        if self.phi.out_dim != 1:
            raise ValueError("phi must have scalar output")
        if self.alpha_bar <= 0:
            raise ValueError("alpha_bar must be positive")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.equilibrium is None:
            self.equilibrium = np.zeros(self.phi.in_dim)
        self.equilibrium = np.asarray(self.equilibrium, dtype=np.float64)
        if self.equilibrium.shape != (self.phi.in_dim,):
            raise ValueError("equilibrium dimension does not match phi")

    @property
    def dim(self) -> int:
        return self.phi.in_dim

    def with_phi(self, phi: Network) -> "LyapunovNet":
        return LyapunovNet(phi, self.alpha_bar, self.augmentation, self.psi,
                           self.huber_delta, self.equilibrium.copy())

    def to_dict(self) -> dict:
        return {
            "network": self.phi.to_dict(),
            "alpha_bar": self.alpha_bar,
            "augmentation": self.augmentation.value,
            "psi": self.psi.value,
            "huber_delta": self.huber_delta,
            "equilibrium": self.equilibrium.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LyapunovNet":
        return cls(Network.from_dict(data["network"]), float(data["alpha_bar"]),
                   Augmentation(data["augmentation"]), Psi(data["psi"]),
                   float(data.get("huber_delta", 1.0)), np.asarray(data["equilibrium"], float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "LyapunovNet":
        return cls.from_dict(json.loads(text))


def psi_terms(model: LyapunovNet, s):
    """psi(s), psi'(s), psi''(s); derivatives at kinks taken as 0."""
    if model.psi is Psi.ABS:
        return np.abs(s), np.sign(s), np.zeros_like(s)
    if model.psi is Psi.SQUARE:
        return s * s, 2.0 * s, np.full_like(s, 2.0)
    h = model.huber_delta
    inside = np.abs(s) <= h
    val = np.where(inside, 0.5 * s * s / h, np.abs(s) - 0.5 * h)
    d1 = np.where(inside, s / h, np.sign(s))
    d2 = np.where(inside, 1.0 / h, 0.0)
    return val, d1, d2


def augmentation_terms(model: LyapunovNet, dx):
    """Value and gradient of the augmentation at offsets ``dx = x - x*``."""
    a = model.alpha_bar
    r2 = np.sum(dx * dx, axis=1)
    if model.augmentation is Augmentation.NORM:
        r = np.sqrt(r2)
        safe = np.where(r > 0.0, r, 1.0)
        grad = np.where((r > 0.0)[:, None], dx / safe[:, None], 0.0)
        return a * r, a * grad
    if model.augmentation is Augmentation.SQNORM:
        return a * r2, 2.0 * a * dx
    return a * np.log1p(r2), (2.0 * a / (1.0 + r2))[:, None] * dx


def lyap_eval(model: LyapunovNet, x) -> LyapEval:
    """V and DV at a point (scalars / (d,)) or a batch ((B,), (B, d))."""
    xb, single = _as_batch(model.phi, x)
    ev = forward_joint(model.phi, xb)
    phi_star = forward_value(model.phi, model.equilibrium)[0]
    s = ev.value[:, 0] - phi_star
    pv, pd, _ = psi_terms(model, s)
    av, ag = augmentation_terms(model, xb - model.equilibrium)
    v = pv + av
    grad = pd[:, None] * ev.input_grad[:, :, 0] + ag
    # V(x*) = 0 exactly, independent of rounding in phi
    at_eq = np.all(xb == model.equilibrium, axis=1)
    v = np.where(at_eq, 0.0, v)
    if single:
        return LyapEval(v[0], grad[0])
    return LyapEval(v, grad)


def lyap_directional(model: LyapunovNet, x, direction) -> tuple[np.ndarray, np.ndarray]:
    """V(x_i) and DV(x_i) . direction_i over a batch, without forming DV."""
    xb, _ = _as_batch(model.phi, x)
    direction = np.broadcast_to(np.asarray(direction, dtype=np.float64), xb.shape)
    val, q = forward_directional(model.phi, xb, direction)
    phi_star = forward_value(model.phi, model.equilibrium)[0]
    pv, pd, _ = psi_terms(model, val[:, 0] - phi_star)
    av, ag = augmentation_terms(model, xb - model.equilibrium)
    v = np.where(np.all(xb == model.equilibrium, axis=1), 0.0, pv + av)
    return v, pd * q[:, 0] + np.sum(ag * direction, axis=1)


def orbital_derivative(model: LyapunovNet, system, x) -> np.ndarray:
    """DV(x) . f(x) for an autonomous (or closed-loop) system."""
    xb, single = _as_batch(model.phi, x)
    if system.dim != model.dim:
        raise ValueError(f"system dimension {system.dim} != model dimension {model.dim}")
    out = lyap_directional(model, xb, system.f(xb))[1]
    return out[0] if single else out


def grad_of_directional(model: LyapunovNet, x, direction, weights) -> np.ndarray:
    """Parameter gradient of ``sum_i w_i * DV(x_i) . direction_i``.

    ``direction`` is treated as independent of theta (the vector field, or the
    closed-loop field with the control held fixed).
    """
    xb, _ = _as_batch(model.phi, x)
    w = np.asarray(weights, dtype=np.float64)
    direction = np.broadcast_to(np.asarray(direction, dtype=np.float64), xb.shape)
    ev, tape = _forward_tape(model.phi, xb, True, direction)
    phi_star = forward_value(model.phi, model.equilibrium)[0]
    _, pd, pdd = psi_terms(model, ev.value[:, 0] - phi_star)
    q = ev.input_grad[:, 0, 0]
    # d/dtheta [psi'(s) q] = psi''(s) q ds/dtheta + psi'(s) dq/dtheta
    value_seed = w * pdd * q
    g = backward(model.phi, tape, value_seed[:, None], (w * pd)[:, None, None])
    star_seed = -np.sum(value_seed)
    if star_seed != 0.0:
        _, tape0 = _forward_tape(model.phi, model.equilibrium[None, :], False)
        g = g + backward(model.phi, tape0, np.array([[star_seed]]), None)
    return g
