"""Adam and the training loops (Lyapunov-Net, control co-training, baselines)."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .dynamics import ControlLaw, DynamicalSystem
from .model import LyapunovNet, augmentation_terms, psi_terms
from .net import Network, _forward_tape, backward, clip_params, forward_value
from .risk import RiskConfig, sample_uniform

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update. Returns a new state and new parameters."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grad)):
        raise TrainingError(f"non-finite gradient at Adam step {state.t + 1}")
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    t = state.t + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grad
    v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(state.lr, state.beta1, state.beta2, state.eps, m, v, t), new


class StopReason(str, Enum):
    TOLERANCE = "tolerance"
    MAX_ITERS = "max_iters"


@dataclass
class TrainConfig:
    max_iters: int = 500
    tol: float = 1e-4
    n_samples: int = 100_000
    gamma: float = 0.1
    delta: float = 0.0
    seed: int = 0
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_after_step: bool = True
    resample: bool = False
    control_lr: Optional[float] = None
    record_wall_clock: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")

    def adam(self, lr=None) -> AdamState:
        return AdamState(self.lr if lr is None else lr, self.beta1, self.beta2, self.eps)


@dataclass
class CurvePoint:
    iter: int
    wall_clock_s: float
    risk: float
    risk_nl_metric: float
    violation_count: int
    max_violation: float


@dataclass
class TrainReport:
    risk_curve: list[CurvePoint] = field(default_factory=list)
    stop_reason: StopReason = StopReason.MAX_ITERS
    final_risk: float = float("nan")
    iters: int = 0


class _Sampler:
    """Fixed collocation points, or a fresh draw per iteration from one stream."""

    def __init__(self, system: DynamicalSystem, cfg: TrainConfig, center):
        self.system, self.cfg, self.center = system, cfg, center
        self.rng = np.random.default_rng(cfg.seed)
        self.fixed = None if cfg.resample else self._draw()

    def _draw(self):
        return sample_uniform(self.system.lower, self.system.upper, self.cfg.n_samples,
                              self.cfg.delta, self.center, self.rng).points

    def __call__(self):
        return self.fixed if self.fixed is not None else self._draw()


@dataclass
class _LnPass:
    h: np.ndarray           # hinge arguments
    orbital: np.ndarray     # DV . f
    v: np.ndarray
    tape: object
    q: np.ndarray           # D phi . f
    pd: np.ndarray
    pdd: np.ndarray
    fx: np.ndarray
    grad_v: np.ndarray


def _ln_forward(model: LyapunovNet, x, fx, gamma, full: bool = False) -> _LnPass:
    """Hinge pass; ``full`` also forms DV, otherwise only D phi . f is carried."""
    ev, tape = _forward_tape(model.phi, x, True, None if full else fx)
    phi_star = forward_value(model.phi, model.equilibrium)[0]
    s = ev.value[:, 0] - phi_star
    pv, pd, pdd = psi_terms(model, s)
    dx = x - model.equilibrium
    av, ag = augmentation_terms(model, dx)
    if full:
        dphi = ev.input_grad[:, :, 0]
        q = np.sum(dphi * fx, axis=1)
        grad_v = pd[:, None] * dphi + ag
    else:
        q, grad_v = ev.input_grad[:, 0, 0], None
    orbital = pd * q + np.sum(ag * fx, axis=1)
    h = orbital + gamma * np.linalg.norm(dx, axis=1)
    return _LnPass(h, orbital, pv + av, tape, q, pd, pdd, fx, grad_v)


def _ln_grad(model: LyapunovNet, p: _LnPass, x, weights) -> np.ndarray:
    """theta-gradient of sum_i weights_i * (DV(x_i) . f_i) with f held fixed."""
    value_seed = weights * p.pdd * p.q
    if p.grad_v is None:
        grad_seed = (weights * p.pd)[:, None, None]
    else:
        grad_seed = ((weights * p.pd)[:, None] * p.fx)[:, :, None]
    g = backward(model.phi, p.tape, value_seed[:, None], grad_seed)
    star = -float(np.sum(value_seed))
    if star != 0.0:
        _, tape0 = _forward_tape(model.phi, model.equilibrium[None, :], False)
        g = g + backward(model.phi, tape0, np.array([[star]]), None)
    return g


def _nl_metric_from(p: _LnPass) -> float:
    n = p.h.size
    return float(np.sum(np.maximum(p.orbital, 0.0) + np.maximum(-p.v, 0.0)) / n)


def _check_finite(value, it):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite risk at iteration {it}")


def ln_risk_and_grad(model: LyapunovNet, system: DynamicalSystem, x, gamma: float):
    """Mean squared hinge and its theta-gradient on fixed samples."""
    p = _ln_forward(model, x, system.f(x), gamma)
    hp = np.maximum(p.h, 0.0)
    risk = float(np.sum(hp * hp) / x.shape[0])
    return risk, _ln_grad(model, p, x, 2.0 * hp / x.shape[0])


def _run_loop(cfg: TrainConfig, evaluate: Callable, step: Callable, label: str) -> TrainReport:
    report = TrainReport()
    start = time.perf_counter()
    for it in range(1, cfg.max_iters + 1):
        point, grad_fn = evaluate()
        _check_finite(point[0], it)
        clock = time.perf_counter() - start if cfg.record_wall_clock else 0.0
        report.risk_curve.append(CurvePoint(it, clock, *point))
        report.iters = it
        if point[0] < cfg.tol:
            report.stop_reason = StopReason.TOLERANCE
            break
        if it == cfg.max_iters:
            break
        step(grad_fn)
    report.final_risk = report.risk_curve[-1].risk
    log.info("%s: %s after %d iterations, risk %.3e", label, report.stop_reason.value,
             report.iters, report.final_risk)
    return report


def train_lyapunov(model: LyapunovNet, system: DynamicalSystem, cfg: TrainConfig,
                   callback: Optional[Callable] = None) -> tuple[LyapunovNet, TrainReport]:
    """Minimise the mean squared hinge with full-batch Adam and box clipping."""
    if system.dim != model.dim:
        raise ValueError("model and system dimensions differ")
    if system.control_dim:
        raise ValueError("train_lyapunov needs an autonomous or closed-loop system")
    sampler = _Sampler(system, cfg, model.equilibrium)
    state = {"model": model, "adam": cfg.adam()}

    def evaluate():
        x = sampler()
        m = state["model"]
        p = _ln_forward(m, x, system.f(x), cfg.gamma)
        hp = np.maximum(p.h, 0.0)
        n = x.shape[0]
        point = (float(np.sum(hp * hp) / n), _nl_metric_from(p),
                 int(np.count_nonzero(p.h > 0)), float(np.max(p.h)))
        if callback is not None:
            callback(m)
        return point, lambda: _ln_grad(m, p, x, 2.0 * hp / n)

    def step(grad_fn):
        m = state["model"]
        adam, theta = adam_step(state["adam"], m.phi.get_params(), grad_fn())
        phi = m.phi.with_params(theta)
        if cfg.clip_after_step:
            phi = clip_params(phi)
        state["model"], state["adam"] = m.with_phi(phi), adam

    report = _run_loop(cfg, evaluate, step, "train_lyapunov")
    return state["model"], report


def _control_grad(control: ControlLaw, system: DynamicalSystem, x, grad_v, u_pre, u, weights):
    """eta-gradient of sum_i w_i DV(x_i) . f(x_i, u(x_i)) with DV held fixed."""
    dfdu = system.dfdu(x, u)                             # (B, d, n)
    dh_du = np.einsum("bd,bdn->bn", grad_v, dfdu)
    seed = weights[:, None] * dh_du * control.output_jac(u_pre)
    _, tape = _forward_tape(control.net, x, False)
    g = backward(control.net, tape, seed, None)
    if not control.train_bias:
        pos = 0
        for W, b in zip(control.net.weights, control.net.biases):
            pos += W.size
            g[pos:pos + b.size] = 0.0
            pos += b.size
    return g


def train_clf(model: LyapunovNet, system: DynamicalSystem, control: ControlLaw,
              cfg: TrainConfig) -> tuple[LyapunovNet, ControlLaw, TrainReport]:
    """Alternate one theta step and one eta step per iteration on shared samples."""
    if control.net.out_dim != system.control_dim or control.net.in_dim != system.dim:
        raise ValueError("control law dimensions do not match the system")
    if system.dim != model.dim:
        raise ValueError("model and system dimensions differ")
    sampler = _Sampler(system, cfg, model.equilibrium)
    ctrl_lr = cfg.lr if cfg.control_lr is None else cfg.control_lr
    state = {"model": model, "control": control, "adam": cfg.adam(), "cadam": cfg.adam(ctrl_lr)}

    def closed(m, c, x):
        u_pre = forward_value(c.net, x)
        u = c.saturation * np.tanh(u_pre) if c.saturation is not None else u_pre
        fx = system.f(x, u)
        return _ln_forward(m, x, fx, cfg.gamma, full=True), u_pre, u

    def evaluate():
        x = sampler()
        m, c = state["model"], state["control"]
        p, _, _ = closed(m, c, x)
        hp = np.maximum(p.h, 0.0)
        n = x.shape[0]
        point = (float(np.sum(hp * hp) / n), _nl_metric_from(p),
                 int(np.count_nonzero(p.h > 0)), float(np.max(p.h)))
        return point, (x, p)

    def step(ctx):
        x, p = ctx
        n = x.shape[0]
        m, c = state["model"], state["control"]
        hp = np.maximum(p.h, 0.0)
        adam, theta = adam_step(state["adam"], m.phi.get_params(), _ln_grad(m, p, x, 2.0 * hp / n))
        phi = m.phi.with_params(theta)
        if cfg.clip_after_step:
            phi = clip_params(phi)
        m = m.with_phi(phi)
        state["model"], state["adam"] = m, adam
        if ctrl_lr == 0.0:
            return
        # eta step against the updated theta
        p2, u_pre, u = closed(m, c, x)
        hp2 = np.maximum(p2.h, 0.0)
        g = _control_grad(c, system, x, p2.grad_v, u_pre, u, 2.0 * hp2 / n)
        cadam, eta = adam_step(state["cadam"], c.net.get_params(), g)
        net = c.net.with_params(eta)
        if cfg.clip_after_step:
            net = clip_params(net)
        state["control"], state["cadam"] = ControlLaw(net, c.saturation, c.train_bias), cadam

    report = _run_loop(cfg, evaluate, step, "train_clf")
    return state["model"], state["control"], report


# --- baselines ------------------------------------------------------------

def dl_risk_and_grad(V: Network, system: DynamicalSystem, x, cfg: Optional[RiskConfig] = None):
    """Three-term squared-hinge baseline risk and its gradient."""
    cfg = cfg or RiskConfig()
    fx = system.f(x)
    ev, tape = _forward_tape(V, x, True, fx)
    v = ev.value[:, 0]
    r2 = np.sum(x * x, axis=1)
    orb = np.maximum(ev.input_grad[:, 0, 0] + r2, 0.0)
    up = np.maximum(v - cfg.dl_upper * r2, 0.0)
    lo = np.maximum(cfg.dl_lower * r2 - v, 0.0)
    n = x.shape[0]
    risk = float(np.sum(orb * orb + up * up + lo * lo) / n)
    value_seed = (2.0 * (up - lo) / n)[:, None]
    grad_seed = (2.0 * orb / n)[:, None, None]
    return risk, backward(V, tape, value_seed, grad_seed)


def nl_risk_and_grad(V: Network, system: DynamicalSystem, x):
    """V(0)^2 + mean of unsquared hinges, and its (sub)gradient."""
    ev, tape = _forward_tape(V, x, True, system.f(x))
    v, orb = ev.value[:, 0], ev.input_grad[:, 0, 0]
    n = x.shape[0]
    origin = np.zeros((1, V.in_dim))
    ev0, tape0 = _forward_tape(V, origin, with_jac=False)
    v0 = float(ev0.value[0, 0])
    risk = v0 * v0 + float(np.sum(np.maximum(orb, 0.0) + np.maximum(-v, 0.0)) / n)
    value_seed = (-(v < 0).astype(float) / n)[:, None]
    grad_seed = ((orb > 0).astype(float) / n)[:, None, None]
    grad = backward(V, tape, value_seed, grad_seed) + backward(V, tape0, np.array([[2.0 * v0]]), None)
    return risk, grad


def train_baseline(V: Network, system: DynamicalSystem, cfg: TrainConfig, method: str,
                   callback: Optional[Callable] = None) -> tuple[Network, TrainReport]:
    """Train a generic network with the DL (``"dl"``) or NL (``"nl"``) risk."""
    if method not in ("dl", "nl"):
        raise ValueError(f"unknown baseline {method!r}")
    sampler = _Sampler(system, cfg, np.zeros(system.dim))
    state = {"net": V, "adam": cfg.adam()}

    def evaluate():
        x = sampler()
        net = state["net"]
        if method == "dl":
            risk, grad = dl_risk_and_grad(net, system, x)
        else:
            risk, grad = nl_risk_and_grad(net, system, x)
        if callback is not None:
            callback(net)
        return (risk, float("nan"), 0, float("nan")), grad

    def step(grad):
        adam, theta = adam_step(state["adam"], state["net"].get_params(), grad)
        net = state["net"].with_params(theta)
        if cfg.clip_after_step:
            net = clip_params(net)
        state["net"], state["adam"] = net, adam

    report = _run_loop(cfg, evaluate, step, f"train_{method}")
    return state["net"], report
