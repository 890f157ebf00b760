"""Small feed-forward networks with joint value / input-gradient evaluation.

The forward pass carries the input Jacobian of every layer alongside the
activations, so a single sweep yields both ``phi(x)`` and ``D phi(x)``.
``param_grad`` runs reverse accumulation over that augmented sweep, which is
what a loss containing ``D phi(x) . f(x)`` needs.

Shapes: a batch of inputs is ``(B, d)``; Jacobians are stored as ``(B, d, w)``
(input index first) so each layer is a single matmul against ``W.T``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

_TANH2_MAX = 4.0 / (3.0 * np.sqrt(3.0))  # max |tanh''|


class Activation(str, Enum):
    REPU = "repu"
    TANH = "tanh"
    SOFTPLUS = "softplus"

    def apply(self, z):
        if self is Activation.REPU:
            return np.maximum(z, 0.0) ** 2
        if self is Activation.TANH:
            return np.tanh(z)
        return np.logaddexp(0.0, z)

    def deriv(self, z):
        if self is Activation.REPU:
            return 2.0 * np.maximum(z, 0.0)
        if self is Activation.TANH:
            return 1.0 - np.tanh(z) ** 2
        return _sigmoid(z)

    def deriv2(self, z):
        if self is Activation.REPU:
            # subgradient 0 at the kink
            return np.where(z > 0.0, 2.0, 0.0)
        if self is Activation.TANH:
            t = np.tanh(z)
            return -2.0 * t * (1.0 - t * t)
        s = _sigmoid(z)
        return s * (1.0 - s)

    def deriv_bounds(self, lo, hi):
        """Upper bounds of |sigma'| and |sigma''| over each interval [lo, hi]."""
        if self is Activation.REPU:
            d1 = 2.0 * np.maximum(hi, 0.0)
            d2 = np.where(hi > 0.0, 2.0, 0.0)
        elif self is Activation.TANH:
            nearest = np.where((lo <= 0.0) & (hi >= 0.0), 0.0,
                               np.where(lo > 0.0, lo, hi))
            d1 = 1.0 - np.tanh(nearest) ** 2
            d2 = np.full_like(lo, _TANH2_MAX)
        else:
            d1 = _sigmoid(hi)
            d2 = np.full_like(lo, 0.25)
        return d1, d2


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Network:
    """Dense net; hidden layers use ``activation``, the output layer is linear."""

    layer_widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: Activation = Activation.TANH

    def __post_init__(self):
        self.layer_widths = [int(w) for w in self.layer_widths]
        self.activation = Activation(self.activation)
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ValueError(f"invalid layer widths {self.layer_widths}")
        n = len(self.layer_widths) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ValueError("weights/biases do not match layer_widths")
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_widths[i + 1], self.layer_widths[i])
            if W.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: expected W{shape}, b({shape[0]},), "
                                 f"got W{W.shape}, b{b.shape}")

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def param_count(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_params(self, theta: np.ndarray) -> "Network":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.param_count,):
            raise ValueError(f"expected {self.param_count} parameters, got {theta.shape}")
        weights, biases, pos = [], [], 0
        for W, b in zip(self.weights, self.biases):
            weights.append(theta[pos:pos + W.size].reshape(W.shape).copy())
            pos += W.size
            biases.append(theta[pos:pos + b.size].copy())
            pos += b.size
        return Network(list(self.layer_widths), weights, biases, self.activation)

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation.value,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Network":
        return cls(data["layer_widths"], data["weights"], data["biases"],
                   Activation(data["activation"]))

    def to_json(self) -> str:
        # repr of a Python float round-trips, i.e. full double precision
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Network":
        return cls.from_dict(json.loads(text))


@dataclass
class JointEval:
    value: np.ndarray       # (B, n_out)
    input_grad: np.ndarray  # (B, d, n_out)


@dataclass
class _Tape:
    acts: list = field(default_factory=list)    # a_0 .. a_{L-1}
    jacs: list = field(default_factory=list)    # J_0 .. J_{L-1}, J_0 is None (identity)
    pre: list = field(default_factory=list)     # z_1 .. z_{L-1}
    pre_jac: list = field(default_factory=list)  # W_l J_{l-1}


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"input has shape {x.shape}, network expects dimension {net.in_dim}")
    return x, single


def forward_value(net: Network, x) -> np.ndarray:
    """Network output. ``x`` of shape (d,) gives (n_out,), (B, d) gives (B, n_out)."""
    xb, single = _as_batch(net, x)
    a = xb
    act = net.activation
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        a = act.apply(a @ W.T + b)
    y = a @ net.weights[-1].T + net.biases[-1]
    return y[0] if single else y


def _rmat(T: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``T @ M`` for a (B, d, k) stack as one 2-D product."""
    B, d, k = T.shape
    return (T.reshape(B * d, k) @ M).reshape(B, d, M.shape[1])


def _forward_tape(net: Network, xb: np.ndarray, with_jac: bool,
                  tangent: Optional[np.ndarray] = None) -> tuple[JointEval, _Tape]:
    """Forward sweep recording what ``backward`` needs.

    With ``tangent`` (B, d) only the directional derivative D phi . tangent is
    carried, so ``input_grad`` has shape (B, 1, n_out) and the sweep costs a
    factor d less than the full Jacobian.
    """
    act = net.activation
    tape = _Tape()
    a, J = xb, None
    if tangent is not None:
        J = np.asarray(tangent, dtype=np.float64)[:, None, :]
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        tape.acts.append(a)
        tape.jacs.append(J)
        z = a @ W.T + b
        a = act.apply(z)
        tape.pre.append(z)
        if with_jac:
            Zp = np.broadcast_to(W.T, (xb.shape[0],) + W.T.shape) if J is None else _rmat(J, W.T)
            tape.pre_jac.append(Zp)
            J = act.deriv(z)[:, None, :] * Zp
    tape.acts.append(a)
    tape.jacs.append(J)
    W, b = net.weights[-1], net.biases[-1]
    y = a @ W.T + b
    if with_jac:
        if J is None:
            g = np.broadcast_to(W.T, (xb.shape[0],) + W.T.shape).copy()
        else:
            g = _rmat(J, W.T)
    else:
        g = None
    return JointEval(y, g), tape


def forward_joint(net: Network, x) -> JointEval:
    """Value and input Jacobian in one sweep.

    For a single point and scalar output the result is squeezed to a scalar
    value and a (d,) gradient.
    """
    xb, single = _as_batch(net, x)
    ev, _ = _forward_tape(net, xb, with_jac=True)
    if single:
        v, g = ev.value[0], ev.input_grad[0]
        if net.out_dim == 1:
            return JointEval(v[0], g[:, 0])
        return JointEval(v, g)
    return ev


def forward_directional(net: Network, x, direction) -> tuple[np.ndarray, np.ndarray]:
    """Values (B, n_out) and directional derivatives D phi(x_i) . direction_i (B, n_out)."""
    xb, _ = _as_batch(net, x)
    ev, _ = _forward_tape(net, xb, True, np.broadcast_to(direction, xb.shape))
    return ev.value, ev.input_grad[:, 0, :]


def param_grad(net: Network, x, value_seed, grad_seed=None) -> np.ndarray:
    """Gradient w.r.t. all parameters of
    ``sum_i <value_seed_i, phi(x_i)> + <grad_seed_i, D phi(x_i)>``.

    Seeds are the chain-rule cotangents of the caller's loss: ``value_seed``
    has shape (B,) or (B, n_out), ``grad_seed`` (B, d) or (B, d, n_out) and may
    be None when the loss does not touch the input gradient. The result is
    flattened in the same order as ``Network.get_params``.
    """
    xb, _ = _as_batch(net, x)
    B, d, n_out = xb.shape[0], net.in_dim, net.out_dim
    vs = np.asarray(value_seed, dtype=np.float64).reshape(B, n_out)
    gs = None
    if grad_seed is not None:
        gs = np.asarray(grad_seed, dtype=np.float64).reshape(B, d, n_out)
    if not np.all(np.isfinite(vs)) or (gs is not None and not np.all(np.isfinite(gs))):
        raise ValueError("non-finite seed passed to param_grad")

    _, tape = _forward_tape(net, xb, gs is not None)
    return backward(net, tape, vs, gs)


def backward(net: Network, tape: _Tape, vs: np.ndarray, gs) -> np.ndarray:
    """Reverse sweep over a recorded forward pass; see ``param_grad``."""
    with_jac = gs is not None
    act = net.activation
    L = len(net.weights)
    gW = [None] * L
    gb = [None] * L

    # output layer: y = a W^T + b, g = J W^T
    W = net.weights[-1]
    a, J = tape.acts[-1], tape.jacs[-1]
    gW[-1] = vs.T @ a
    gb[-1] = vs.sum(axis=0)
    a_bar = vs @ W
    J_bar = None
    if with_jac:
        if J is None:
            gW[-1] = gW[-1] + gs.sum(axis=0).T
        else:
            gW[-1] = gW[-1] + np.tensordot(gs, J, axes=([0, 1], [0, 1]))
            J_bar = _rmat(gs, W)

    for l in range(L - 2, -1, -1):
        W = net.weights[l]
        z = tape.pre[l]
        a_prev, J_prev = tape.acts[l], tape.jacs[l]
        s1 = act.deriv(z)
        z_bar = a_bar * s1
        Zp_bar = None
        if with_jac:
            Zp = tape.pre_jac[l]
            # J = s1 * Zp
            Zp_bar = s1[:, None, :] * J_bar
            s1_bar = np.sum(J_bar * Zp, axis=1)
            z_bar = z_bar + s1_bar * act.deriv2(z)
        gW[l] = z_bar.T @ a_prev
        gb[l] = z_bar.sum(axis=0)
        if l > 0:
            a_bar = z_bar @ W
        if with_jac:
            if J_prev is None:
                gW[l] = gW[l] + Zp_bar.sum(axis=0).T
            else:
                gW[l] = gW[l] + np.tensordot(Zp_bar, J_prev, axes=([0, 1], [0, 1]))
                J_bar = _rmat(Zp_bar, W)

    parts = []
    for Wg, bg in zip(gW, gb):
        parts.append(Wg.ravel())
        parts.append(bg)
    return np.concatenate(parts)


def xavier_init(layer_widths, activation=Activation.TANH, seed: int = 0) -> Network:
    """Xavier-uniform weights clipped to [-1, 1]; zero biases."""
    if not layer_widths or len(layer_widths) < 2:
        raise ValueError("need at least input and output widths")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_widths[:-1], layer_widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(np.clip(W, -1.0, 1.0))
        biases.append(np.zeros(fan_out))
    return Network(list(layer_widths), weights, biases, Activation(activation))


def clip_params(net: Network) -> Network:
    return Network(list(net.layer_widths),
                   [np.clip(W, -1.0, 1.0) for W in net.weights],
                   [np.clip(b, -1.0, 1.0) for b in net.biases],
                   net.activation)


def interval_bounds(net: Network, lower, upper):
    """Interval bound propagation over a box of inputs.

    Returns per hidden layer ``(lo, hi)`` of the pre-activations, plus
    bounds of the output.
    """
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    act = net.activation
    pre = []
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
        zc, zr = W @ c + b, np.abs(W) @ r
        zlo, zhi = zc - zr, zc + zr
        pre.append((zlo, zhi))
        # all activations are monotone non-decreasing
        lo, hi = act.apply(zlo), act.apply(zhi)
    W, b = net.weights[-1], net.biases[-1]
    c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
    out = (W @ c + b - np.abs(W) @ r, W @ c + b + np.abs(W) @ r)
    return pre, out


def derivative_bounds(net: Network, lower, upper) -> tuple[float, float, float]:
    """Bounds over a box on ``|phi|`` range width, ``||D phi||`` and ``||D^2 phi||``.

    Operator norms are chained layer by layer using the interval bounds of
    the pre-activations; for scalar output the Hessian bound is a spectral
    norm bound.
    """
    pre, (olo, ohi) = interval_bounds(net, lower, upper)
    act = net.activation
    G, H = 1.0, 0.0
    for (zlo, zhi), W in zip(pre, net.weights[:-1]):
        d1, d2 = act.deriv_bounds(zlo, zhi)
        nW = np.linalg.norm(W, 2)
        nDW = np.linalg.norm(d1[:, None] * W, 2)
        H = float(np.max(d2)) * (nW * G) ** 2 + nDW * H
        G = nDW * G
    nW = np.linalg.norm(net.weights[-1], 2)
    return float(np.max(ohi - olo)), float(nW * G), float(nW * H)
