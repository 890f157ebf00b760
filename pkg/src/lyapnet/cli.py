"""Command-line entry point: ``lyapnet {train,certify,roa,compare}``.

Exit codes: 0 success or certified, 1 configuration error, 2 training hit
max_iters, 3 certification grid over budget, 4 unsupported dimension,
5 certificate refused (grid or margin failure).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .certify import GridBudgetError, certify, mc_audit
from .config import ConfigError, RunConfig, build_control, build_model, build_system, layer_widths, load_config
from .dynamics import ControlLaw, closed_loop, estimate_lipschitz
from .model import LyapunovNet
from .net import xavier_init
from .risk import risk_nl, sample_uniform
from .roa import UnsupportedDimension, estimate_roa, rk4_integrate, validate_roa_detailed
from .train import StopReason, TrainConfig, train_baseline, train_clf, train_lyapunov

log = logging.getLogger("lyapnet")

EXIT_OK, EXIT_CONFIG, EXIT_MAX_ITERS, EXIT_BUDGET, EXIT_DIM, EXIT_REFUSED = 0, 1, 2, 3, 4, 5


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


def _prepare(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return out


def _load_pair(cfg: RunConfig, model_path, control_path):
    system = build_system(cfg["system"])
    model_path = Path(model_path) if model_path else cfg.out_dir / "model.json"
    if not model_path.exists():
        raise ConfigError(f"model file {model_path} not found")
    model = LyapunovNet.from_json(model_path.read_text())
    if model.dim != system.dim:
        raise ConfigError(f"model dimension {model.dim} does not match system dimension {system.dim}")
    if system.control_dim:
        control_path = Path(control_path) if control_path else None
        if control_path is None or not control_path.exists():
            raise ConfigError("a controlled system needs --control pointing to a control law file")
        control = ControlLaw.from_dict(json.loads(control_path.read_text()))
        system = closed_loop(system, control)
    return model, system


def cmd_train(cfg: RunConfig) -> int:
    out = _prepare(cfg)
    system = build_system(cfg["system"])
    model = build_model(cfg, system)
    tc = cfg.train_config()
    control = None
    if system.control_dim:
        if cfg["control"] is None:
            raise ConfigError("system has a control input but the config has no control section")
        control = build_control(cfg, system)
        model, control, report = train_clf(model, system, control, tc)
        (out / "control.json").write_text(json.dumps(control.to_dict()) + "\n")
    else:
        model, report = train_lyapunov(model, system, tc)
    (out / "model.json").write_text(model.to_json() + "\n")
    _write_csv(out / "risk.csv", ["iter", "wall_clock_s", "risk_ln", "risk_nl_metric", "violation_count",
                                  "max_violation"],
               [[p.iter, _fmt(p.wall_clock_s), _fmt(p.risk), _fmt(p.risk_nl_metric), p.violation_count,
                 _fmt(p.max_violation)] for p in report.risk_curve])
    _write_json(out / "summary.json", {
        "stop_reason": report.stop_reason.value,
        "final_risk": report.final_risk,
        "iters": report.iters,
        "param_count": model.phi.param_count,
        "wall_clock_s": report.risk_curve[-1].wall_clock_s,
        "equilibrium": model.equilibrium.tolist(),
        "controlled": control is not None,
    })
    print(f"train: {report.stop_reason.value} after {report.iters} iterations, risk {report.final_risk:.3e}")
    return EXIT_OK if report.stop_reason is StopReason.TOLERANCE else EXIT_MAX_ITERS


def cmd_certify(cfg: RunConfig, model_path=None, control_path=None) -> int:
    out = _prepare(cfg)
    model, system = _load_pair(cfg, model_path, control_path)
    c = cfg["certify"]
    if c["M_method"] == "analytic" and system.lipschitz_bound is None:
        system.lipschitz_bound = estimate_lipschitz(system, 20_000, cfg.seed)
    try:
        cert = certify(model, system, c["delta"], c["c"], c["gamma_bar"], c["M_method"],
                       grid_kind=c["grid"], budget=c["budget"], mc_points=c["mc_points"],
                       M_samples=c["M_samples"], safety=c["safety"], seed=cfg.seed)
    except GridBudgetError as exc:
        n, bad = mc_audit(model, system, c["delta"], c["mc_points"], cfg.seed + 1)
        _write_json(out / "mc_audit.json", {
            "certificate": False,
            "reason": "grid budget exceeded",
            "required_points": str(exc.required),
            "budget": exc.budget,
            "delta": c["delta"],
            "mc_audit": {"n": n, "violations": bad},
        })
        print(f"certify: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    _write_json(out / "certificate.json", cert.to_dict())
    print(f"certify: {cert.verdict.value} (M={cert.M:.4g}, margin={cert.margin:.3e}, "
          f"grid max residual={cert.grid_max_residual:.3e}, MC violations {cert.mc_violations}/{cert.mc_n})")
    return EXIT_OK if cert.verdict.value == "certified" else EXIT_REFUSED


def cmd_roa(cfg: RunConfig, model_path=None, control_path=None) -> int:
    out = _prepare(cfg)
    model, system = _load_pair(cfg, model_path, control_path)
    r = cfg["roa"]
    if system.dim != 2:
        print(f"roa: only 2d systems are supported (got d={system.dim})", file=sys.stderr)
        return EXIT_DIM
    est = estimate_roa(model, system, r["resolution"], r["exempt_radius"])
    rows = []
    for i, a in enumerate(est.axes[0]):
        for j, b in enumerate(est.axes[1]):
            rows.append([_fmt(a), _fmt(b), _fmt(est.V[i, j]), _fmt(est.DVf[i, j]),
                         int(est.valid[i, j]), int(est.in_roa[i, j])])
    _write_csv(out / "roa_grid.csv", ["x1", "x2", "V", "DVf", "valid", "in_roa"], rows)
    summary = {"c_star": est.c_star, "area_fraction": est.area_fraction,
               "valid_region_fraction": est.valid_region_fraction, "grid_resolution": list(est.grid_resolution),
               "validated_fraction": None}
    traj_rows = []
    if est.c_star > 0:
        val = validate_roa_detailed(model, system, est, r["n_starts"], cfg.seed, r["delta_target"],
                                    r["t_max"], r["h"])
        summary["validated_fraction"] = val.fraction
        summary["n_starts"] = r["n_starts"]
        summary["exits"] = int(val.exited.sum())
        for k, x0 in enumerate(val.starts[: r["n_plot"]]):
            tr = rk4_integrate(system, x0, r["h"], r["t_max"], r["delta_target"], model.equilibrium)
            traj_rows += [[k, _fmt(t), _fmt(s[0]), _fmt(s[1])] for t, s in zip(tr.times, tr.states)]
    _write_csv(out / "trajectories.csv", ["traj", "t", "x1", "x2"], traj_rows)
    _write_json(out / "roa_summary.json", summary)
    print(f"roa: c*={est.c_star:.4g}, area fraction {est.area_fraction:.4f}, "
          f"validated {summary['validated_fraction']}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    out = _prepare(cfg)
    system = build_system(cfg["system"])
    cmp_, m = cfg["compare"], cfg["model"]
    clock_on = cfg["train"]["record_wall_clock"]
    rows, finals = [], {}
    for seed in cmp_["seeds"]:
        held = sample_uniform(system.lower, system.upper, cmp_["metric_samples"], 0.0,
                              system.equilibrium, np.random.SeedSequence([seed, 1]).generate_state(1)[0]).points
        tc = TrainConfig(max_iters=cmp_["iters"], tol=cmp_["tol"], n_samples=cmp_["n_samples"],
                         gamma=cfg["risk"]["gamma"], delta=cfg["risk"]["delta"], seed=seed,
                         lr=cfg["train"]["lr"], beta1=cfg["train"]["beta1"], beta2=cfg["train"]["beta2"],
                         eps=cfg["train"]["eps"], clip_after_step=cfg["train"]["clip_after_step"],
                         resample=cfg["train"]["resample"], record_wall_clock=clock_on)
        for method in cmp_["methods"]:
            curve = []
            start = time.perf_counter()

            def record(V):
                clock = time.perf_counter() - start if clock_on else 0.0
                curve.append((clock, risk_nl(V, system, held).value))

            widths = layer_widths(system.dim, m["depth"], m["width"])
            if method == "ln":
                model = build_model(cfg, system, seed)
                train_lyapunov(model, system, tc, callback=record)
            else:
                act = cmp_["dl_activation"] if method == "dl" else cmp_["nl_activation"]
                train_baseline(xavier_init(widths, act, seed), system, tc, method, callback=record)
            for it, (clock, val) in enumerate(curve, start=1):
                rows.append([method, seed, it, _fmt(clock), _fmt(val)])
            finals.setdefault(method, []).append(curve[-1][1])
            log.info("compare %s seed %d: final l2 %.3e after %d iterations", method, seed, curve[-1][1], len(curve))
    _write_csv(out / "compare.csv", ["method", "seed", "iter", "wall_clock_s", "l2_metric"], rows)
    summary = {meth: {"median_final_l2": float(np.median(v)), "final_l2": v,
                      "zero_hits": int(sum(1 for x in v if x == 0.0))} for meth, v in finals.items()}
    _write_json(out / "compare_summary.json", summary)
    for meth, s in summary.items():
        print(f"compare: {meth} median l2 {s['median_final_l2']:.3e}, zero on {s['zero_hits']} seed(s)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyapnet", description="Train and certify neural Lyapunov functions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "certify", "roa", "compare"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        if name in ("certify", "roa"):
            sp.add_argument("--model", help="model JSON (default: <out-dir>/model.json)")
            sp.add_argument("--control", help="control law JSON, required for controlled systems")
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out_dir": args.out_dir})
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "certify":
            return cmd_certify(cfg, args.model, args.control)
        if args.command == "roa":
            return cmd_roa(cfg, args.model, args.control)
        return cmd_compare(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnsupportedDimension as exc:
        print(f"roa: {exc}", file=sys.stderr)
        return EXIT_DIM
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
