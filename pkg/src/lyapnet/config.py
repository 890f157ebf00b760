"""JSON run configuration: defaults, validation and object builders.

Every section is optional. Unknown keys are rejected, and errors carry the
line of the offending key in the source file when it can be located.
"""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import dynamics
from .dynamics import ControlLaw, DynamicalSystem
from .model import Augmentation, LyapunovNet, Psi
from .net import Activation, xavier_init
from .train import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "out",
    "system": {
        "name": "curve_tracking",
        "dim": 10,
        "copies": 3,
        "seed": 0,
        "domain": None,
        "equilibrium": "refined",
        "matrix": None,
        "base": None,
        "lipschitz_bound": None,
    },
    "model": {
        "depth": 3,
        "width": 10,
        "activation": "repu",
        "alpha_bar": 0.5,
        "augmentation": "norm",
        "psi": "abs",
        "huber_delta": 1.0,
    },
    "risk": {
        "gamma": 0.1,
        "n_samples": 100_000,
        "delta": 0.0,
    },
    "train": {
        "max_iters": 500,
        "tol": 1e-4,
        "lr": 0.005,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "clip_after_step": True,
        "resample": False,
        "record_wall_clock": True,
    },
    "control": None,
    "certify": {
        "delta": 0.1,
        "c": 0.01,
        "gamma_bar": 0.05,
        "M_method": "empirical",
        "grid": "covering",
        "budget": 10_000_000,
        "mc_points": 100_000,
        "M_samples": 100_000,
        "safety": 1.5,
    },
    "roa": {
        "resolution": 201,
        "exempt_radius": 0.0,
        "n_starts": 100,
        "delta_target": 0.05,
        "t_max": 20.0,
        "h": 0.01,
        "n_plot": 10,
    },
    "compare": {
        "methods": ["ln", "dl", "nl"],
        "seeds": [0, 1, 2, 3, 4],
        "iters": 200,
        "n_samples": 20_000,
        "metric_samples": 20_000,
        "tol": 1e-12,
        "dl_activation": "softplus",
        "nl_activation": "tanh",
    },
}

CONTROL_DEFAULTS = {
    "depth": 0,
    "width": 0,
    "activation": "tanh",
    "saturation": None,
    "train_bias": True,
    "lr": None,
    "init": "xavier",
}

SYSTEMS = ("curve_tracking", "pendulum", "synthetic", "block_concat", "linear")


class ConfigError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None, path: Optional[str] = None):
        where = f"{path or 'config'}:{line}: " if line else f"{path or 'config'}: "
        super().__init__(where + msg)
        self.line = line


@dataclass
class RunConfig:
    data: dict
    source: Optional[str] = None

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out_dir"])

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        t, r = self.data["train"], self.data["risk"]
        ctrl = self.data.get("control") or {}
        return TrainConfig(max_iters=t["max_iters"], tol=t["tol"], n_samples=r["n_samples"],
                           gamma=r["gamma"], delta=r["delta"],
                           seed=self.seed if seed is None else seed, lr=t["lr"],
                           beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"],
                           clip_after_step=t["clip_after_step"], resample=t["resample"],
                           control_lr=ctrl.get("lr"), record_wall_clock=t["record_wall_clock"])


def _line_of(text: Optional[str], key: str) -> Optional[int]:
    """Line of a (possibly dotted) key, searching each part after its parent."""
    if not text:
        return None
    pos, hit = 0, None
    for part in key.split("."):
        m = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, pos)
        if m is None:
            break
        pos, hit = m.end(), m
    return text.count("\n", 0, hit.start()) + 1 if hit else None


def _merge(defaults: dict, given: dict, section: str, text) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            dotted = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown key {dotted}", _line_of(text, dotted))
        if isinstance(defaults[key], dict) and isinstance(val, dict):
            out[key] = _merge(defaults[key], val, f"{section}.{key}".lstrip("."), text)
        else:
            out[key] = val
    return out


def _require(cond: bool, msg: str, text, key: Optional[str] = None):
    """Raise unless ``cond``; the key defaults to the message's first word."""
    if not cond:
        raise ConfigError(msg, _line_of(text, key or msg.split()[0]))


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate(data: dict, text: Optional[str] = None) -> dict:
    top = _merge({k: v for k, v in DEFAULTS.items() if k != "control"} | {"control": None},
                 {k: v for k, v in data.items() if k != "control"}, "", text)
    if data.get("control") is not None:
        if not isinstance(data["control"], dict):
            raise ConfigError("control must be an object", _line_of(text, "control"))
        top["control"] = _merge(CONTROL_DEFAULTS, data["control"], "control", text)

    _require(_is_int(top["seed"]) and 0 <= top["seed"] < 2 ** 64, "seed must be a 64-bit integer", text)
    s = top["system"]
    _require(s["name"] in SYSTEMS, f"system.name must be one of {', '.join(SYSTEMS)}", text)
    _require(_is_int(s["dim"]) and s["dim"] >= 1, "system.dim must be a positive integer", text)
    _require(_is_int(s["copies"]) and s["copies"] >= 1, "system.copies must be a positive integer", text)
    if s["domain"] is not None:
        dom = s["domain"]
        _require(isinstance(dom, dict) and set(dom) == {"lower", "upper"},
                 "system.domain needs exactly lower and upper", text)
    if s["name"] == "linear":
        _require(s["matrix"] is not None, "system.matrix is required for a linear system", text, "system.name")
    if s["name"] == "block_concat":
        _require(isinstance(s["base"], dict), "system.base is required for block_concat", text, "system.name")

    m = top["model"]
    _require(_is_int(m["depth"]) and m["depth"] >= 0, "model.depth must be a non-negative integer", text)
    _require(_is_int(m["width"]) and (m["width"] >= 1 or m["depth"] == 0), "model.width must be positive", text)
    for key, enum in (("activation", Activation), ("augmentation", Augmentation), ("psi", Psi)):
        _require(m[key] in [e.value for e in enum], f"model.{key} must be one of {[e.value for e in enum]}", text)
    _require(_is_num(m["alpha_bar"]) and m["alpha_bar"] > 0, "model.alpha_bar must be positive", text)
    _require(_is_num(m["huber_delta"]) and m["huber_delta"] > 0, "model.huber_delta must be positive", text)

    r = top["risk"]
    _require(_is_num(r["gamma"]) and r["gamma"] > 0, "risk.gamma must be positive", text)
    _require(_is_int(r["n_samples"]) and r["n_samples"] >= 1, "risk.n_samples must be at least 1", text)
    _require(_is_num(r["delta"]) and r["delta"] >= 0, "risk.delta must be non-negative", text)

    t = top["train"]
    _require(_is_int(t["max_iters"]) and t["max_iters"] >= 1, "train.max_iters must be at least 1", text)
    _require(_is_num(t["tol"]) and t["tol"] > 0, "train.tol must be positive", text)
    _require(_is_num(t["lr"]) and t["lr"] > 0, "train.lr must be positive", text)

    c = top["certify"]
    _require(_is_num(c["delta"]) and 0 < c["delta"] < 1, "certify.delta must lie in (0, 1)", text)
    _require(_is_num(c["c"]) and 0 < c["c"] < 1, "certify.c must lie in (0, 1)", text)
    _require(_is_num(c["gamma_bar"]) and c["gamma_bar"] > 0, "certify.gamma_bar must be positive", text)
    _require(c["gamma_bar"] <= r["gamma"], "certify.gamma_bar must not exceed risk.gamma", text)
    _require(c["M_method"] in ("analytic", "empirical"), "certify.M_method must be analytic or empirical", text)
    _require(c["grid"] in ("covering", "lemma"), "certify.grid must be covering or lemma", text)
    _require(_is_int(c["budget"]) and c["budget"] >= 1, "certify.budget must be a positive integer", text)

    o = top["roa"]
    _require(_is_int(o["resolution"]) and o["resolution"] >= 50, "roa.resolution must be at least 50", text)
    _require(_is_num(o["h"]) and o["h"] > 0, "roa.h must be positive", text)

    cmp_ = top["compare"]
    _require(isinstance(cmp_["methods"], list) and cmp_["methods"]
             and set(cmp_["methods"]) <= {"ln", "dl", "nl"}, "compare.methods must list ln, dl and/or nl", text)
    _require(isinstance(cmp_["seeds"], list) and cmp_["seeds"] and all(_is_int(v) for v in cmp_["seeds"]),
             "compare.seeds must be a list of integers", text)
    _require(_is_int(cmp_["iters"]) and cmp_["iters"] >= 1, "compare.iters must be at least 1", text)

    ctrl = top["control"]
    if ctrl is not None:
        _require(_is_int(ctrl["depth"]) and ctrl["depth"] >= 0, "control.depth must be non-negative", text)
        _require(ctrl["saturation"] is None or (_is_num(ctrl["saturation"]) and ctrl["saturation"] > 0),
                 "control.saturation must be positive or null", text)
        _require(ctrl["lr"] is None or (_is_num(ctrl["lr"]) and ctrl["lr"] >= 0),
                 "control.lr must be non-negative or null", text)
        _require(ctrl["init"] in ("xavier", "zero"), "control.init must be xavier or zero", text)
        _require(ctrl["init"] != "zero" or ctrl["depth"] == 0,
                 "control.init zero needs depth 0 (hidden units would stay identical)", text)
    return top


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read, merge with defaults and validate. ``overrides`` are top-level keys (flags)."""
    text = None
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno, str(path)) from None
        if not isinstance(raw, dict):
            raise ConfigError("top level must be a JSON object", 1, str(path))
    for key, val in (overrides or {}).items():
        if val is not None:
            raw[key] = val
    try:
        return RunConfig(validate(raw, text), None if path is None else str(path))
    except ConfigError as exc:
        if path is not None and not str(exc).startswith(str(path)):
            raise ConfigError(str(exc).split(": ", 1)[1], exc.line, str(path)) from None
        raise


# --- builders --------------------------------------------------------------

def _domain(spec):
    if spec["domain"] is None:
        return None, None
    return np.asarray(spec["domain"]["lower"], float), np.asarray(spec["domain"]["upper"], float)


def build_system(spec: dict) -> DynamicalSystem:
    lower, upper = _domain(spec)
    name = spec["name"]
    if name == "curve_tracking":
        sys = dynamics.curve_tracking(lower=lower, upper=upper, equilibrium=spec["equilibrium"])
    elif name == "pendulum":
        sys = dynamics.pendulum(lower=lower, upper=upper)
    elif name == "synthetic":
        sys = dynamics.synthetic(spec["dim"], spec["seed"], lower, upper)
    elif name == "linear":
        sys = dynamics.linear(spec["matrix"], lower, upper)
    else:
        base = build_system(validate({"system": spec["base"]})["system"])
        sys = dynamics.block_concat(base, spec["copies"])
    if spec["lipschitz_bound"] is not None:
        sys.lipschitz_bound = float(spec["lipschitz_bound"])
    return sys


def layer_widths(d: int, depth: int, width: int, out: int = 1) -> list:
    return [d] + [width] * depth + [out]


def build_model(cfg: RunConfig, system: DynamicalSystem, seed: Optional[int] = None) -> LyapunovNet:
    m = cfg["model"]
    phi = xavier_init(layer_widths(system.dim, m["depth"], m["width"]), m["activation"],
                      cfg.seed if seed is None else seed)
    return LyapunovNet(phi, m["alpha_bar"], m["augmentation"], m["psi"], m["huber_delta"],
                       system.equilibrium.copy())


def build_control(cfg: RunConfig, system: DynamicalSystem, seed: Optional[int] = None) -> ControlLaw:
    c = cfg["control"]
    widths = layer_widths(system.dim, c["depth"], c["width"], system.control_dim)
    # a distinct stream from the Lyapunov network's initialisation
    net = xavier_init(widths, c["activation"], (cfg.seed if seed is None else seed) + 1)
    if c["init"] == "zero":
        # u = 0 at the start; the first eta step is driven by the hinge alone
        net = net.with_params(np.zeros(net.param_count))
    elif not c["train_bias"]:
        net = net.with_params(net.get_params() * _weight_mask(net))
    return ControlLaw(net, c["saturation"], c["train_bias"])


def _weight_mask(net) -> np.ndarray:
    parts = []
    for W, b in zip(net.weights, net.biases):
        parts += [np.ones(W.size), np.zeros(b.size)]
    return np.concatenate(parts)


def with_overrides(cfg: RunConfig, **sections: Any) -> RunConfig:
    """Copy of ``cfg`` with section keys replaced, revalidated."""
    data = copy.deepcopy(cfg.data)
    for sec, vals in sections.items():
        if isinstance(vals, dict) and isinstance(data.get(sec), dict):
            data[sec].update(vals)
        else:
            data[sec] = vals
    return RunConfig(validate(data), cfg.source)
