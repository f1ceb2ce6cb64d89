"""Command-line front end.

Runs the core package in-process; ``serve`` starts the HTTP service.
Relative output paths resolve under $INFERBEAM_OUTPUT (default: cwd).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .channel import sweep_ground_truth
from .experiments import (
    FAMILIES, ResultBundle, ScenarioConfig, gen_environments, initial_samples, latency_report, noise_robustness_study,
    run_alignment_study, run_blockage_study, train_family, trials_cdf,
)
from .grid import build_grid, build_phop_table
from .io import (
    load_environment, load_params, load_samples, read_csv, save_beam_map, save_environment, save_ground_truth,
    save_params, save_samples, write_csv,
)
from .protocol import InferenceOptions, bia

log = logging.getLogger("inferbeam")

ALIGN_HEADER = ["delta_m", "seed", "env", "session", "true_node", "node", "beam_id", "n_trials", "sls", "elapsed_ms", "traditional_ms"]
BLOCK_HEADER = ["seed", "env", "blockage", "session", "node", "old_beam", "new_beam", "extra_trials", "sls"]
NOISE_HEADER = ["seed", "crf", "k", "exp_w_clean", "exp_w_noisy", "rel_change", "m_clean", "m_noisy", "sigma_bs", "sigma_sec", "flip_bs", "flip_sec"]


def output_root() -> Path:
    return Path(os.environ.get("INFERBEAM_OUTPUT", "."))


def resolve(path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# config flags


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON study file; flags override its values")
    for f in dataclasses.fields(ScenarioConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in ("seeds", "dims"):
            p.add_argument(flag, type=int, nargs="+", dest=f.name, default=None)
        elif f.type in ("bool",) or isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, default=None, type=lambda s: s.lower() in ("1", "true", "yes"))
        elif isinstance(f.default, str) or f.name == "family":
            p.add_argument(flag, dest=f.name, default=None)
        elif isinstance(f.default, int) and not isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, type=int, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=float, default=None)


def config_from_args(args) -> ScenarioConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    for f in dataclasses.fields(ScenarioConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = tuple(v) if isinstance(v, list) else v
    return ScenarioConfig.from_dict(base)


def _thetas(args, cfg: ScenarioConfig, grid=None):
    if args.theta_bs and args.theta_sec:
        return load_params(args.theta_bs, grid), load_params(args.theta_sec, grid)
    if args.theta_bs or args.theta_sec:
        raise SystemExit("give both --theta-bs and --theta-sec, or neither")
    return None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_env(args):
    out = resolve(args.out)
    out.mkdir(parents=True, exist_ok=True)
    envs = gen_environments(args.family, args.count, args.seed)
    names = []
    for i, env in enumerate(envs):
        name = f"env_{i:03d}.json"
        save_environment(env, out / name)
        names.append(name)
    split = min(args.n_train, len(names))
    _write_json(out / "manifest.json", {"family": args.family, "seed": args.seed, "train": names[:split], "test": names[split:]})
    print(f"wrote {len(envs)} environments to {out}")


def cmd_sweep(args):
    env = load_environment(args.env)
    gt = sweep_ground_truth(env)
    out = resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_ground_truth(env.grid, gt, out)
    print(f"wrote ground truth for {env.grid.n_nodes} nodes to {out}")


def cmd_train(args):
    cfg = config_from_args(args)
    out = resolve(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    r1, r2 = train_family(cfg, cfg.train_seed)
    grid = build_grid(cfg.template.dims, cfg.template.spacing)  # per-edge checkpoints list the edge table
    save_params(r1.params, out / "theta_bs.txt", grid)
    save_params(r2.params, out / "theta_sec.txt", grid)
    rows = [[name, it, norm] for name, r in (("bs", r1), ("sec", r2)) for it, norm in r.history]
    write_csv(out / "training_history.csv", ["crf", "iteration", "grad_norm"], rows)
    _write_json(out / "training_summary.json", {
        "config": cfg.to_dict(),
        "bs": {"converged": r1.converged, "iterations": r1.iterations, "w": list(map(float, r1.params.w)), "m": list(map(float, r1.params.m))},
        "sec": {"converged": r2.converged, "iterations": r2.iterations, "w": list(map(float, r2.params.w)), "m": list(map(float, r2.params.m))},
    })
    print(f"wrote parameters to {out}")


def cmd_infer(args):
    env = load_environment(args.env)
    grid = env.grid
    t1, t2 = load_params(args.theta_bs, grid), load_params(args.theta_sec, grid)
    if args.samples:
        nodes, beams = load_samples(args.samples, env.space)
    else:
        gt = sweep_ground_truth(env)
        nodes, beams = initial_samples(grid, gt, args.sample_fraction, np.random.default_rng(args.seed))
    table = build_phop_table(grid.dims, t1.K)
    B = bia(nodes, beams, t1, t2, grid, table, env.space, InferenceOptions(engine=args.engine))
    out = resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    query = args.nodes if args.nodes else None
    save_beam_map(B, out, query, args.top)
    if args.samples_out:
        save_samples(nodes, beams, env.space, resolve(args.samples_out))
    print(f"wrote beam selection map to {out}")


def cmd_simulate(args):
    cfg = config_from_args(args)
    out = resolve(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    theta = _thetas(args, cfg, build_grid(cfg.template.dims, cfg.template.spacing))
    studies = ["alignment", "blockage", "noise"] if args.study == "all" else [args.study]
    summary = {"config": cfg.to_dict()}
    if theta is None and ("alignment" in studies or "blockage" in studies):
        r1, r2 = train_family(cfg, cfg.train_seed)
        theta = (r1.params, r2.params)
    if "alignment" in studies:
        deltas = args.deltas if args.deltas else None
        res = run_alignment_study(cfg, theta, deltas, workers=args.workers)
        write_csv(out / "alignment_sessions.csv", ALIGN_HEADER, res.sessions)
        summary["alignment"] = res.summary
    if "blockage" in studies:
        res = run_blockage_study(cfg, theta, workers=args.workers)
        write_csv(out / "blockage_sessions.csv", BLOCK_HEADER, res.sessions)
        summary["blockage"] = res.summary
    if "noise" in studies:
        res = noise_robustness_study(cfg, workers=args.workers)
        write_csv(out / "noise_params.csv", NOISE_HEADER, res.sessions)
        summary["noise"] = res.summary
    _write_json(out / "summary.json", summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, indent=2, sort_keys=True))


def cmd_report(args):
    src = resolve(args.input)
    rows = read_csv(src / "alignment_sessions.csv")
    typed = [
        {"delta_m": float(r["delta_m"]), "n_trials": int(r["n_trials"]), "sls": int(r["sls"]),
         "elapsed_ms": float(r["elapsed_ms"]), "traditional_ms": float(r["traditional_ms"])}
        for r in rows
    ]
    lat = latency_report(ResultBundle(typed))
    header = ["delta_m", "sessions", "inferbeam_mean_ms", "inferbeam_p50_ms", "inferbeam_p90_ms", "traditional_mean_ms", "reduction_pct"]
    write_csv(src / "latency_report.csv", header, lat)
    cdf_rows = []
    for delta in sorted({r["delta_m"] for r in typed}):
        sel = [r for r in typed if r["delta_m"] == delta]
        inferred = [r["n_trials"] if not r["sls"] else 10**9 for r in sel]
        for n, c in enumerate(trials_cdf(inferred, args.max_trials), start=1):
            cdf_rows.append([delta, n, float(c)])
    write_csv(src / "trials_cdf.csv", ["delta_m", "n_trials", "fraction"], cdf_rows)
    for r in lat:
        print(f"delta={r['delta_m']:g} m  sessions={r['sessions']}  inferbeam={r['inferbeam_mean_ms']:.2f} ms  "
              f"traditional={r['traditional_mean_ms']:.2f} ms  reduction={r['reduction_pct']:.1f}%")


def cmd_serve(args):
    import uvicorn

    uvicorn.run("inferbeam.service:app", host=args.host, port=args.port, log_level="info")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inferbeam", description="CRF-based beam alignment simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-env", help="generate synthetic floor plans")
    s.add_argument("--family", choices=sorted(FAMILIES), default="condo")
    s.add_argument("--count", type=int, default=55)
    s.add_argument("--n-train", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="envs")
    s.set_defaults(func=cmd_gen_env)

    s = sub.add_parser("sweep", help="exhaustive-sweep ground truth for one environment")
    s.add_argument("--env", required=True)
    s.add_argument("--out", default="ground_truth.csv")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("train", help="fit both CRFs on a family's training plans")
    _add_config_flags(s)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="backend inference: beam selection map from samples")
    s.add_argument("--env", required=True)
    s.add_argument("--theta-bs", required=True)
    s.add_argument("--theta-sec", required=True)
    s.add_argument("--samples", help="sample table; drawn from the ground truth when omitted")
    s.add_argument("--sample-fraction", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--nodes", type=int, nargs="*")
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--engine", choices=["lbp", "exact"], default="lbp")
    s.add_argument("--out", default="beam_map.csv")
    s.add_argument("--samples-out")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("simulate", help="alignment, blockage and noise studies")
    _add_config_flags(s)
    s.add_argument("--study", choices=["alignment", "blockage", "noise", "all"], default="alignment")
    s.add_argument("--deltas", type=float, nargs="+")
    s.add_argument("--theta-bs")
    s.add_argument("--theta-sec")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("report", help="latency table and trial CDF from a simulate run")
    s.add_argument("--input", required=True)
    s.add_argument("--max-trials", type=int, default=20)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
