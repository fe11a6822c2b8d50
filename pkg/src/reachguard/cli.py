"""Command-line entry point: solve, compare, sage-run, eval, export-plots.

Seeding: the master seed ``m`` is expanded per job as
``SeedSequence(m, spawn_key=(j,))`` where ``j`` is the seed index; every
component inside a job then spawns its own child streams.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import critics as cr
from . import dynamics as dyn
from . import hj_grid as hj
from . import sage
from .config import ConfigError, dumps_toml, parse_config, system_name
from .envs import compute_metrics, make_env, run_episode, write_episode_csv
from .neural import CheckpointFormatError, GaussianPolicyHead, load_mlp
from .track import SplineTrack, TrackFormatError

log = logging.getLogger("reachguard")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
ENV_FOR_SYSTEM = {"double_integrator": "di", "dubins": "dubins", "bike": "track"}


def job_seed(master: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(index,))


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("REACHGUARD_THREADS", "1")))
    except ValueError:
        raise ConfigError("REACHGUARD_THREADS must be an integer") from None


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

class Manifest:
    """Written before any work starts; timings and artifacts are appended at the end."""

    def __init__(self, out_dir: Path, command: str, cfg: dict, seeds: list):
        self.path = out_dir / "manifest.json"
        self.data = {"command": command, "tool": "reachguard", "version": __version__,
                     "python": platform.python_version(), "numpy": np.__version__,
                     "seed": cfg["seed"], "seeds": seeds, "config": cfg, "artifacts": [], "timings": {}}
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.toml").write_text(dumps_toml(cfg))
        self._t0 = time.perf_counter()
        self.write()

    def add(self, *paths) -> None:
        self.data["artifacts"].extend(str(p) for p in paths)

    def time(self, key: str, seconds: float) -> None:
        self.data["timings"][key] = round(seconds, 3)

    def write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=1, default=str))

    def finish(self) -> None:
        self.time("total", time.perf_counter() - self._t0)
        missing = [p for p in self.data["artifacts"] if not Path(p).exists()]
        if missing:
            raise OSError(f"artifacts missing at exit: {missing}")
        self.write()


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def load_track(cfg) -> SplineTrack:
    return SplineTrack.from_file(cfg["track"]["path"]) if cfg["track"]["path"] else SplineTrack.default()


def solve_grid(cfg) -> hj.ValueGrid:
    sysname = system_name(cfg)
    s = cfg["solver"]
    model = dyn.get_system(sysname)
    if sysname == "dubins":
        V, _ = cr.dubins_grid(tuple(s["grid"]), cfg["gamma"], controls=s["controls"][0], dt=s["dt"])
        return V
    spec = hj.default_spec("di", tuple(s["grid"]))
    V, _ = hj.solve(spec, model, hj.default_l("di"), hj.make_control_mesh(model, s["controls"]), s["dt"],
                    cfg["gamma"], tol=s["tol"], max_iters=s["max_iters"], scheme=s["scheme"])
    return V


def solve_track(cfg, track, progress=None) -> hj.SegmentedValue:
    t = cfg["track"]
    return hj.segment_solve(track, dyn.bike(), segment_length=t["segment_length"], overlap=t["overlap"],
                            h_xy=t["h_xy"], n_v=t["n_v"], n_phi=t["n_phi"], margin=t["margin"],
                            controls=tuple(cfg["solver"]["controls"]), dt=cfg["solver"]["dt"],
                            gamma=cfg["gamma"], tol=t["tol"], max_iters=t["max_iters"], progress=progress)


def load_static_value(path: str, sysname: str, track=None):
    p = Path(path)
    if sysname == "bike":
        return hj.SegmentedValue.load(p, track, dyn.bike())
    return hj.load_grid(p, expected_dim=dyn.get_system(sysname).dim_x)


def env_factory(cfg, track=None):
    sysname = system_name(cfg)
    name = ENV_FOR_SYSTEM[sysname]
    if name == "track":
        weights = tuple(float(w) for w in cfg["track"]["reward_weights"])
        return lambda seed=None: make_env("track", track=track, reward_weights=weights, seed=seed)
    return lambda seed=None: make_env(name, seed=seed)


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_solve(cfg, out: Path) -> int:
    sysname = system_name(cfg)
    man = Manifest(out, "solve", cfg, [cfg["seed"]])
    t0 = time.perf_counter()
    if sysname == "bike":
        track = load_track(cfg)
        sv = solve_track(cfg, track, progress=lambda k, n, r: log.info("segment %d/%d: %d sweeps", k + 1, n, len(r)))
        sv.save(out / "segments")
        man.add(out / "segments" / "segments.json")
    else:
        V = solve_grid(cfg)
        hj.save_grid(V, out / "grid.hjvg")
        man.add(out / "grid.hjvg")
        log.info("solved %s grid in %d sweeps (converged=%s)", sysname, V.metadata["iterations"],
                 V.metadata["converged"])
    man.time("solve", time.perf_counter() - t0)
    man.finish()
    return EXIT_OK


def build_task(cfg) -> cr.ClassicalTask:
    sysname = system_name(cfg)
    s = cfg["solver"]
    if sysname == "double_integrator":
        return cr.di_task(grid_n=s["grid"][0], grid_gamma=cfg["gamma"], controls=s["controls"][0])
    if sysname == "dubins":
        return cr.dubins_task(grid_n=tuple(s["grid"]), grid_gamma=cfg["gamma"])
    raise ConfigError("compare runs on the double_integrator or dubins systems")


def _critic_job(args):
    task, rule, cfg_critic, master, j = args
    c = cfg_critic
    conf = cr.CriticConfig.for_rule(rule, hidden=tuple(c["hidden"]), batch_size=c["batch_size"],
                                    buffer_size=c["buffer_size"], total_steps=c["steps"],
                                    eval_every=c["eval_every"], prioritized=c["prioritized"])
    try:
        res = cr.train_safety_critic(task, conf, job_seed(master, j))
        return rule, j, res.curve, None
    except cr.DivergenceError as exc:
        return rule, j, [], str(exc)


def cmd_compare(cfg, out: Path) -> int:
    c = cfg["critic"]
    seeds = list(range(c["seeds"]))
    man = Manifest(out, "compare", cfg, seeds)
    t0 = time.perf_counter()
    task = build_task(cfg)
    hj.save_grid(task.grid, out / "oracle_grid.hjvg")
    man.time("oracle", time.perf_counter() - t0)
    jobs = [(task, rule, c, cfg["seed"], j) for rule in c["rules"] for j in seeds]
    t1 = time.perf_counter()
    workers = max_workers()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_critic_job, jobs))
    else:
        results = [_critic_job(j) for j in jobs]
    man.time("training", time.perf_counter() - t1)
    rows = [(rule, j, step, repr(float(a))) for rule, j, curve, _ in results for step, a in curve]
    _write_csv(out / "auroc_curve.csv", ("rule", "seed", "step", "auroc"), rows)
    summary = {"task": task.name, "mesh_points": task.info["mesh_points"], "rules": {}, "failed": []}
    for rule in c["rules"]:
        finals = [curve[-1][1] for r, _, curve, err in results if r == rule and err is None and curve]
        summary["rules"][rule] = {"mean": float(np.mean(finals)) if finals else None,
                                  "std": float(np.std(finals)) if finals else None, "final": finals}
    summary["failed"] = [{"rule": r, "seed": j, "error": err} for r, j, _, err in results if err]
    summary["partial"] = bool(summary["failed"])
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    man.add(out / "auroc_curve.csv", out / "summary.json", out / "oracle_grid.hjvg")
    man.finish()
    for rule, s in summary["rules"].items():
        if s["mean"] is not None:
            log.info("%s: AUROC %.4f +- %.4f", rule, s["mean"], s["std"])
    return EXIT_DIVERGED if summary["partial"] else EXIT_OK


def _safety_path(cfg, cli_safety):
    """``--safety static:<path>`` sets both the source and the grid path."""
    if cli_safety and cli_safety.startswith("static:"):
        return "static", cli_safety.split(":", 1)[1]
    if cli_safety:
        return cli_safety, cfg["agent"]["grid"]
    return cfg["agent"]["safety"], cfg["agent"]["grid"]


def sage_config(cfg) -> sage.SageConfig:
    a = cfg["agent"]
    return sage.SageConfig(mode=a["mode"], safety=a["safety"], epsilon=float(a["epsilon"]), total_steps=a["steps"],
                           warmup=a["warmup"], eval_interval=a["eval_interval"], eval_episodes=a["eval_episodes"],
                           batch_size=a["batch_size"], buffer_size=a["buffer_size"], hidden=tuple(a["hidden"]),
                           lr=a["lr"], gamma=a["gamma"], tau=a["tau"], alpha=a["alpha"], safety_tau=a["safety_tau"])


def cmd_sage_run(cfg, out: Path) -> int:
    sysname = system_name(cfg)
    track = load_track(cfg) if sysname == "bike" else None
    conf = sage_config(cfg)
    seeds = list(range(cfg["agent"]["seeds"]))
    man = Manifest(out, "sage-run", cfg, seeds)
    static_value = None
    if conf.gated and conf.safety == "static":
        if not cfg["agent"]["grid"]:
            raise ConfigError("static safety needs a solved grid: --safety static:<path>")
        static_value = load_static_value(cfg["agent"]["grid"], sysname, track)
    mk = env_factory(cfg, track)
    for j in seeds:
        t0 = time.perf_counter()
        d = out / f"seed_{j:02d}"
        res = sage.sage_train(mk, conf, job_seed(cfg["seed"], j), static_value, d,
                              progress=lambda row: log.info("step %d: ECP %.3f", row["step"], row["ECP"]))
        man.add(d / "train_metrics.csv")
        man.time(f"seed_{j:02d}", time.perf_counter() - t0)
        log.info("seed %d: %d interventions, buffer %d", j, res.interventions, res.buffer_size)
    man.finish()
    return EXIT_OK


def cmd_eval(cfg, out: Path, args) -> int:
    sysname = system_name(cfg)
    track = load_track(cfg) if sysname == "bike" else None
    env = env_factory(cfg, track)(seed=None)
    man = Manifest(out, "eval", cfg, [cfg["seed"]])
    rng = np.random.default_rng(job_seed(cfg["seed"], 0))
    actor = None
    if args.actor:
        net = load_mlp(args.actor)
        actor = GaussianPolicyHead(net, env.model.dim_u, env.model.control_lo, env.model.control_hi)
        propose = lambda o, r, d: actor.act(o.features, None, True)  # noqa: E731
    else:
        propose = lambda o, r, d: r.uniform(env.model.control_lo, env.model.control_hi)  # noqa: E731
    gate_cfg = None
    safety = None
    mode = cfg["agent"]["mode"]
    if mode in ("sage", "safesac", "saferandom"):
        if cfg["agent"]["safety"] != "static" or not cfg["agent"]["grid"]:
            raise ConfigError("eval gates only with a static grid: --safety static:<path>")
        safety = sage.StaticSafetyPolicy(load_static_value(cfg["agent"]["grid"], sysname, track), env.model, env.dt)
        gate_cfg = sage.GateConfig(float(cfg["agent"]["epsilon"]), "static")
    ctrl = sage.GatedController(env.model, propose, gate_cfg, safety)
    env.rng = rng
    rows = []
    ep_dir = out / "episodes"
    ep_dir.mkdir(parents=True, exist_ok=True)
    for k in range(args.episodes):
        ep = run_episode(env, lambda o: ctrl(o, rng, actor is not None)[:2], spawn=args.spawn)
        m = compute_metrics(ep)
        write_episode_csv(ep, ep_dir / f"episode_{k:03d}.csv")
        rows.append((k, _fmt(m.ecp), _fmt(m.avg_speed), m.interventions, _fmt(float(np.sum(ep.rewards))),
                     _fmt(m.min_l), m.reason))
    _write_csv(out / "eval_metrics.csv", ("episode", "ECP", "avg_speed", "interventions", "return", "min_l",
                                          "reason"), rows)
    man.add(out / "eval_metrics.csv")
    man.finish()
    ecps = [float(r[1]) for r in rows]
    log.info("mean ECP %.4f over %d episodes", float(np.mean(ecps)), len(rows))
    return EXIT_OK


def export_plot_data(run_dir: Path) -> list[Path]:
    """Long-format tables (metric, group, seed, step, value) plus a figure per metric."""
    from .plotting import plot_series

    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"{run_dir} is not a directory")
    written = []
    auroc = run_dir / "auroc_curve.csv"
    metric_files = sorted(run_dir.glob("seed_*/train_metrics.csv"))
    if (run_dir / "train_metrics.csv").exists():
        metric_files.insert(0, run_dir / "train_metrics.csv")
    if not auroc.exists() and not metric_files:
        raise FileNotFoundError(f"{run_dir} holds no auroc_curve.csv or train_metrics.csv")
    tables = {}
    if auroc.exists():
        with open(auroc, newline="") as fh:
            for r in csv.DictReader(fh):
                tables.setdefault("auroc", []).append(
                    {"metric": "auroc", "group": r["rule"], "seed": r["seed"], "step": r["step"], "value": r["auroc"]})
    for f in metric_files:
        seed = f.parent.name.split("_")[-1] if f.parent != run_dir else "0"
        with open(f, newline="") as fh:
            for r in csv.DictReader(fh):
                for metric in ("ECP", "avg_speed", "interventions", "return"):
                    tables.setdefault(metric, []).append(
                        {"metric": metric, "group": "", "seed": seed, "step": r["step"], "value": r[metric]})
    if not tables:
        raise FileNotFoundError(f"{run_dir} has run files but no rows")
    for metric, rows in tables.items():
        path = run_dir / f"tidy_{metric}.csv"
        _write_csv(path, ("metric", "group", "seed", "step", "value"),
                   [(r["metric"], r["group"], r["seed"], r["step"], r["value"]) for r in rows])
        written.append(path)
        written.append(plot_series(rows, metric, run_dir / f"{metric}.png"))
    return written


def cmd_export(run_dir: Path) -> int:
    for p in export_plot_data(run_dir):
        log.info("wrote %s", p)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reachguard", description="Grid and learned safety values with a safety gate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out-dir", type=Path, default=Path("runs") / sp.prog.split()[-1])

    sp = sub.add_parser("solve", help="solve a safety value grid")
    common(sp)
    sp.add_argument("--system", choices=["di", "double_integrator", "dubins", "bike", "track"])
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--track", type=str)

    sp = sub.add_parser("compare", help="compare HJ, SQRL and CQL critics by AUROC")
    common(sp)
    sp.add_argument("--task", choices=["di", "dubins"])
    sp.add_argument("--rules", type=lambda s: [r.strip() for r in s.split(",") if r.strip()])
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--steps", type=int)

    sp = sub.add_parser("sage-run", help="train the gated agent")
    common(sp)
    sp.add_argument("--env", choices=["di", "dubins", "track"])
    sp.add_argument("--mode", choices=["sage", "safesac", "sac", "random", "saferandom"])
    sp.add_argument("--safety", type=str, help="neural | static:<grid-path>")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--eval-interval", type=int)
    sp.add_argument("--track", type=str)

    sp = sub.add_parser("eval", help="roll out a policy with or without the static gate")
    common(sp)
    sp.add_argument("--env", choices=["di", "dubins", "track"])
    sp.add_argument("--mode", choices=["sage", "safesac", "sac", "random", "saferandom"])
    sp.add_argument("--actor", type=Path, help="actor checkpoint (.mlpc); uniform random actions if omitted")
    sp.add_argument("--safety", type=str, help="static:<grid-path>")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--spawn", choices=["fixed", "random"], default="fixed")
    sp.add_argument("--track", type=str)

    sp = sub.add_parser("export-plots", help="tidy CSVs and figures for a run directory")
    sp.add_argument("run_dir", type=Path)
    return p


def resolve(args) -> dict:
    over = {"seed": args.seed}
    cmd = args.command
    if cmd == "solve":
        over.update(system=args.system, gamma=args.gamma, track=args.track)
    elif cmd == "compare":
        over.update(system=args.task, rules=args.rules, critic_seeds=args.seeds, critic_steps=args.steps)
    else:
        over.update(system=args.env, mode=args.mode, epsilon=args.epsilon, track=args.track)
        if cmd == "sage-run":
            over.update(agent_steps=args.steps, agent_seeds=args.seeds, eval_interval=args.eval_interval)
    cfg = parse_config(args.config, over)
    if cmd in ("sage-run", "eval") and args.safety:
        source, path = _safety_path(cfg, args.safety)
        cfg["agent"]["safety"] = source
        cfg["agent"]["grid"] = path
        if source not in ("static", "neural"):
            raise ConfigError(f"--safety {args.safety!r} must be 'neural' or 'static:<path>'")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "export-plots":
            return cmd_export(args.run_dir)
        cfg = resolve(args)
        out = args.out_dir
        if args.command == "solve":
            return cmd_solve(cfg, out)
        if args.command == "compare":
            return cmd_compare(cfg, out)
        if args.command == "sage-run":
            return cmd_sage_run(cfg, out)
        return cmd_eval(cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (cr.DivergenceError, dyn.NumericalError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, hj.GridFormatError, CheckpointFormatError, TrackFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
