"""Command line interface.

Subcommands: ``simulate`` (one trajectory with excursion trace), ``campaign``
(seeded exit-time campaign), ``barrier`` (boundary minimum vs minimum action
cross-check), ``check`` (assumption checker report), ``bvp`` (1d mean-exit
oracle), ``psi`` (build and score the constructed exit path).  Every command
takes a JSON config file; flags override config fields.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path as FsPath

import numpy as np

from . import action, dynamics, geometry, harness, landscape as ls_mod
from .harness import ExperimentConfig


def _load_config(path: str, overrides: dict) -> ExperimentConfig:
    doc = json.loads(FsPath(path).read_text())
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(doc)


def _cmd_simulate(args):
    cfg = _load_config(args.config, {"dt": args.dt, "master_seed": args.seed})
    lscape, domain, init = cfg.build()
    sigma = args.sigma if args.sigma is not None else cfg.sigma_grid[0]
    a = dynamics.find_attractor(init.x0, lscape)
    rho = cfg.rho if cfg.rho is not None else 0.1 * domain.inradius()
    t_st = cfg.t_st if cfg.t_st is not None else 0.0
    horizon = args.horizon if args.horizon is not None else cfg.horizon_cap
    rec, path, mu = dynamics.simulate_sid(
        init, lscape, domain, sigma=sigma, dt=cfg.dt, horizon=horizon,
        seed=cfg.master_seed,
        gamma_params={"a": a, "threshold": (1 + cfg.eps) * rho, "t_st": t_st},
        snapshot_every=cfg.snapshot_every, cap=cfg.measure_cap,
        path_every=args.path_every)
    out = FsPath(args.out or "trajectory.csv")
    harness.path_to_csv(path, out)
    snaps = [(t, float(np.linalg.norm(p - a))) for t, p in zip(path.times(), path.points)]
    trace = harness.trace_excursions(path, [], a, rho, cfg.eps, t_st,
                                     exit_time=rec.exit_time)
    report = {
        "sigma": sigma, "seed": cfg.master_seed,
        "exit_time": rec.exit_time, "censored": rec.censored,
        "exit_point": None if rec.exit_point is None else list(rec.exit_point),
        "gamma_time": rec.gamma_time, "gamma_before_exit": rec.gamma_before_exit,
        "steps": rec.steps,
        "tau_list": trace.tau_list, "theta_list": trace.theta_list,
        "w2_final": mu.w2_to_dirac(a),
        "path_csv": str(out), "n_path_points": len(snaps),
    }
    print(json.dumps(report, indent=2))


def _cmd_campaign(args):
    cfg = _load_config(args.config, {
        "master_seed": args.seed, "output_dir": args.out,
        "n_workers": args.workers, "dt": args.dt,
    })
    result = harness.run_exit_campaign(cfg)
    print(json.dumps({k: v for k, v in result.summary.items() if k != "config"},
                     indent=2, default=str))


def _cmd_barrier(args):
    cfg = _load_config(args.config, {})
    lscape, domain, init = cfg.build()
    a = dynamics.find_attractor(init.x0, lscape)
    h, z_star = action.compute_H(lscape, domain, a)
    res = action.minimize_action(lscape, a, z_star, N=args.nodes)
    print(json.dumps({
        "attractor": list(a),
        "H_boundary_min": h,
        "z_star": list(z_star),
        "minimum_action_value": res.value,
        "per_horizon": res.per_horizon,
        "relative_gap": abs(res.value - h) / max(abs(h), 1e-300),
        "converged": res.converged,
    }, indent=2))


def _cmd_check(args):
    cfg = _load_config(args.config, {})
    lscape, domain, init = cfg.build()
    a = dynamics.find_attractor(init.x0, lscape)
    lo, hi = domain.bbox()
    lip_v = ls_mod.estimate_lipschitz(lscape.grad_v, (lo, hi), 20000, seed=1)
    lip_f = ls_mod.estimate_lipschitz(lscape.grad_f, (lo - hi, hi - lo), 20000, seed=2)
    k_est, k_pass = ls_mod.check_strong_attraction(lscape, a, 0.1, 0.1, seed=3)
    h, _ = action.compute_H(lscape, domain, a)
    rho = cfg.rho if cfg.rho is not None else 0.1 * domain.inradius()
    report = {
        "attractor": list(a),
        "lipschitz_grad_v_sampled": lip_v,
        "lipschitz_grad_f_sampled": lip_f,
        "declared_flags": {
            "lip_grad_v": lscape.lip_grad_v, "lip_grad_f": lscape.lip_grad_f,
            "bound_grad_f": lscape.bound_grad_f, "scope": lscape.flag_scope,
        },
        "strong_attraction_K": k_est,
        "strong_attraction_pass": bool(k_pass),
        "barrier_H": h,
    }
    try:
        flow_ok, failures = geometry.check_flow_stability(lscape, a, domain,
                                                          n_starts=32, T=20.0, dt=1e-3)
        report["flow_stability_pass"] = bool(flow_ok)
        report["flow_stability_failures"] = [list(f) for f in failures]
    except Exception as exc:  # diagnostic report, keep going
        report["flow_stability_error"] = str(exc)
    if domain.dim <= 3:
        try:
            sub = geometry.check_sublevel(lscape, a, h, domain,
                                          resolution=args.resolution)
            report["sublevel_bounded"] = sub.bounded
            report["sublevel_connected"] = sub.connected
            report["sublevel_touch_points"] = sub.touch_set.tolist()
            cmin = geometry.level_set_min_gradient(lscape, a, h, domain)
            report["level_set_min_grad"] = cmin
            report["level_set_degenerate"] = cmin < 1e-3
        except ValueError as exc:
            report["sublevel_error"] = str(exc)
    print(json.dumps(report, indent=2))


def _cmd_bvp(args):
    cfg = _load_config(args.config, {})
    lscape, domain, init = cfg.build()
    if not isinstance(domain, geometry.Interval):
        raise SystemExit("bvp oracle needs an interval domain")
    sigma = args.sigma if args.sigma is not None else cfg.sigma_grid[0]
    res = harness.bvp_mean_exit_1d(lscape, (domain.lo, domain.hi), sigma,
                                   grid_n=args.grid_n)
    x0 = float(init.x0[0])
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("x,mean_exit\n")
            for x, u in zip(res.xs, res.u):
                fh.write(f"{x!r},{u!r}\n")
    print(json.dumps({"sigma": sigma, "u_at_x0": res.u_at(x0),
                      "grid_n": args.grid_n, "out": args.out}, indent=2))


def _cmd_psi(args):
    cfg = _load_config(args.config, {})
    lscape, domain, init = cfg.build()
    a = dynamics.find_attractor(init.x0, lscape)
    h, _ = action.compute_H(lscape, domain, a)
    rho = args.rho if args.rho is not None else 0.05 * domain.inradius()
    eta = args.eta if args.eta is not None else 0.1 * h
    psi = action.build_psi(init, lscape, domain, a, rho, eta, args.t_a, eps=cfg.eps)
    value = action.action_full(psi, init, lscape)
    if args.out:
        harness.path_to_csv(psi, args.out)
    print(json.dumps({
        "barrier_H": h, "eta": eta, "rho": rho,
        "action_of_psi": value, "budget_H_plus_eta": h + eta,
        "within_budget": value <= h + eta,
        "duration": psi.duration, "n_nodes": int(psi.points.shape[0]),
        "endpoint_outside": not domain.contains(psi.points[-1]),
        "out": args.out,
    }, indent=2))


def main(argv=None):
    p = argparse.ArgumentParser(prog="sidlab",
                                description="exit-time experiments for "
                                            "self-interacting diffusions")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="run one trajectory, dump path and trace")
    ps.add_argument("--config", required=True)
    ps.add_argument("--sigma", type=float)
    ps.add_argument("--seed", type=int, required=True)
    ps.add_argument("--dt", type=float)
    ps.add_argument("--horizon", type=float)
    ps.add_argument("--path-every", type=int, default=10)
    ps.add_argument("--out")
    ps.set_defaults(fn=_cmd_simulate)

    pc = sub.add_parser("campaign", help="run the configured exit-time campaign")
    pc.add_argument("--config", required=True)
    pc.add_argument("--seed", type=int, required=True)
    pc.add_argument("--out")
    pc.add_argument("--workers", type=int)
    pc.add_argument("--dt", type=float)
    pc.set_defaults(fn=_cmd_campaign)

    pb = sub.add_parser("barrier", help="boundary minimum vs minimum action")
    pb.add_argument("--config", required=True)
    pb.add_argument("--nodes", type=int, default=800)
    pb.set_defaults(fn=_cmd_barrier)

    pk = sub.add_parser("check", help="assumption checker report")
    pk.add_argument("--config", required=True)
    pk.add_argument("--resolution", type=float, default=0.02)
    pk.set_defaults(fn=_cmd_check)

    pv = sub.add_parser("bvp", help="1d mean-exit finite difference oracle")
    pv.add_argument("--config", required=True)
    pv.add_argument("--sigma", type=float)
    pv.add_argument("--grid-n", type=int, default=512)
    pv.add_argument("--out")
    pv.set_defaults(fn=_cmd_bvp)

    pp = sub.add_parser("psi", help="build and score the constructed exit path")
    pp.add_argument("--config", required=True)
    pp.add_argument("--rho", type=float)
    pp.add_argument("--eta", type=float)
    pp.add_argument("--t-a", type=float, default=50.0)
    pp.add_argument("--out")
    pp.set_defaults(fn=_cmd_psi)

    args = p.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
