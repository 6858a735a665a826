"""``fluidctl`` command line: train, dataset, train-supervised, eval, verify.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import evaluation as ev
from . import policy as pol
from . import training as tr
from .baselines import make_baseline
from .config import ConfigError, RunConfig, build, convert, load_file
from .fluid import FluidParams

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--env", help="environment id (BaseNR, BuoyNR, Base, Inflow, InBuoy, Hold)")
    p.add_argument("--config", help="INI-style config file")
    p.add_argument("--seed", type=int, help="seed (falls back to FLUIDCTL_SEED, then 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key, e.g. environment.resolution=64")


def make_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fluidctl", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a policy through the differentiable simulator")
    _common(p)
    p.add_argument("--horizon", type=int, help="window length l (default 16)")
    p.add_argument("--iters", type=int, help="number of updates n_i")
    p.add_argument("--ablation", help="loss terms kept: OVE, OV, OE or O")

    p = sub.add_parser("dataset", help="generate a supervised dataset")
    _common(p)
    p.add_argument("--sims", type=int, help="number of simulations (>= 2)")
    p.add_argument("--steps", type=int, help="steps per simulation")

    p = sub.add_parser("train-supervised", help="fit a policy to a supervised dataset")
    _common(p)
    p.add_argument("--data", required=True, help="directory holding train.dset and val.dset")
    p.add_argument("--iters", type=int, help="minibatch iterations")

    p = sub.add_parser("eval", help="run test schedules and compare controllers")
    _common(p)
    p.add_argument("--controller", action="append", required=True,
                   choices=("diff", "sup", "pid", "ls"), help="repeat for a joint comparison")
    p.add_argument("--checkpoint", action="append", default=[],
                   help="policy checkpoint, one per diff/sup controller in the given order")
    p.add_argument("--schedule", choices=("random", "nshape", "hold"))
    p.add_argument("--sims", type=int, help="number of random schedules")
    p.add_argument("--steps", type=int, help="truncate each rollout to this many steps")
    p.add_argument("--jobs", type=int, help="concurrent rollouts")

    p = sub.add_parser("verify", help="run the built-in oracle suites")
    p.add_argument("--config", help="config file; [environment] Poisson settings apply")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--quick", action="store_true", help="fewer seeds for the coupled gradient check")
    return ap


def _flags(args, extra: dict | None = None) -> dict[str, dict]:
    flags: dict[str, dict] = {}

    def put(section, key, value):
        if value is not None:
            flags.setdefault(section, {})[key] = value

    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().rsplit(".", 1)
        put(section, key, convert(section, key, value.strip()))
    put("run", "env", getattr(args, "env", None))
    put("run", "seed", getattr(args, "seed", None))
    put("run", "out", getattr(args, "out", None))
    for (section, key), value in (extra or {}).items():
        put(section, key, value)
    return flags


def _resolve(args, extra: dict | None = None) -> RunConfig:
    sections = load_file(args.config) if getattr(args, "config", None) else {}
    return build(sections, _flags(args, extra))


def _prepare_out(rc: RunConfig) -> Path:
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(rc.resolved_text())
    return out


# --------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    extra = {("training", "horizon"): args.horizon, ("training", "n_i"): args.iters,
             ("training", "ablation"): args.ablation}
    if args.ablation is not None:
        convert("training", "ablation", args.ablation)
    rc = _resolve(args, extra)
    tc = rc.train_config()
    out = _prepare_out(rc)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)

    def progress(row):
        if row["iteration"] % 50 == 0:
            print(f"iter {row['iteration']:6d}  loss {row['loss']:.4g}  O {row['O']:.4g}  "
                  f"V {row['V']:.4g}  E {row['E']:.4g}", flush=True)

    res = tr.train_diffphys(tc, log_path=out / "train_log.csv", checkpoint_dir=ckpt, progress=progress)
    pol.save_checkpoint(ckpt / "best.pol", res.params)
    pol.save_checkpoint(ckpt / "final.pol", res.final)
    for it, err in res.validation:
        print(f"validation @ {it}: {err:.4f}")
    print(f"best iteration {res.best_iteration}; checkpoint {ckpt / 'best.pol'}")
    return EXIT_OK


def cmd_dataset(args) -> int:
    rc = _resolve(args, {("supervised", "sims"): args.sims, ("supervised", "steps"): args.steps})
    try:
        n_train, n_val = tr.split_counts(rc.supervised["sims"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = rc.environment_config()
    out = _prepare_out(rc)
    tc = rc.train_config()
    ds = tr.generate_supervised_dataset(cfg, rc.supervised["sims"], rc.supervised["steps"], rc.seed,
                                        history=tc.history,
                                        progress=lambda k: print(f"simulation {k}", flush=True))
    tr.write_dataset(out / "train.dset", ds.train)
    tr.write_dataset(out / "val.dset", ds.val)
    print(f"{len(ds)} samples: {n_train} training / {n_val} validation simulations -> {out}")
    return EXIT_OK


def cmd_train_supervised(args) -> int:
    rc = _resolve(args, {("supervised", "n_i"): args.iters})
    data = Path(args.data)
    for name in ("train.dset", "val.dset"):
        if not (data / name).is_file():
            raise ConfigError(f"missing dataset file {data / name}")
    cfg = rc.environment_config()
    train = tr.read_dataset(data / "train.dset")
    val = tr.read_dataset(data / "val.dset")
    out = _prepare_out(rc)
    s = rc.supervised
    t0 = time.perf_counter()
    rows = []

    def progress(it, loss):
        rows.append(dict(iteration=it, lr=tr.lr_schedule(tr.TrainConfig(lr0=s["lr0"],
                         lr_half_every=s["lr_half_every"]), it), loss=loss,
                         wall_time=time.perf_counter() - t0))
        print(f"iter {it:7d}  batch loss {loss:.5g}", flush=True)

    res = tr.train_supervised(train, val, dof=cfg.dof, n_i=s["n_i"], lr0=s["lr0"],
                              lr_half_every=s["lr_half_every"], batch_size=s["batch_size"],
                              seed=rc.seed, val_every=s["val_every"], progress=progress)
    vals = dict(res.val_loss)
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("iteration", "lr", "loss", "val_loss", "wall_time"))
        w.writeheader()
        for r in rows:
            w.writerow({**r, "val_loss": vals.get(r["iteration"], "")})
    (out / "checkpoints").mkdir(exist_ok=True)
    pol.save_checkpoint(out / "checkpoints" / "best.pol", res.params)
    print(f"best validation loss {min(vals.values()):.5g} at iteration {res.best_iteration}")
    return EXIT_OK


def _controllers(args, rc: RunConfig, cfg):
    """Validated factories, one per requested controller."""
    learned = [c for c in args.controller if c in ("diff", "sup")]
    if len(args.checkpoint) != len(learned):
        raise ConfigError(f"{len(learned)} learned controller(s) need as many --checkpoint flags, "
                          f"got {len(args.checkpoint)}")
    ckpts = iter(args.checkpoint)
    out = []
    for kind in args.controller:
        if kind in ("diff", "sup"):
            path = next(ckpts)
            if not Path(path).is_file():
                raise ConfigError(f"checkpoint not found: {path}")
            params = pol.load_checkpoint(path)
            if params.dof != cfg.dof:
                raise ConfigError(f"{path} is a {params.dof}-DOF policy; {cfg.id} is {cfg.dof}-DOF")
            name = "Diff" if kind == "diff" else "Sup"
            out.append((name, lambda p=params, n=name: pol.PolicyController(p, n)))
        elif kind == "pid":
            gains = rc.pid_gains(cfg)
            make_baseline("pid", cfg, gains)
            out.append(("PID", lambda g=gains: make_baseline("pid", cfg, g)))
        else:
            try:
                make_baseline("loopshaping", cfg)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            co = rc.loopshaping()
            out.append(("LS", lambda c=co: make_baseline("loopshaping", cfg, coeffs=c)))
    return out


def cmd_eval(args) -> int:
    extra = {("evaluation", "schedule"): args.schedule, ("evaluation", "sims"): args.sims,
             ("evaluation", "steps"): args.steps, ("evaluation", "jobs"): args.jobs}
    rc = _resolve(args, extra)
    cfg = rc.environment_config()
    factories = _controllers(args, rc, cfg)
    e = rc.evaluation
    schedules = ev.test_schedules(cfg, e["schedule"], rc.seed, e["sims"], e["targets"], e["hold"])
    out = _prepare_out(rc)
    traj_dir = out / "trajectories"
    traj_dir.mkdir(exist_ok=True)
    hold_mode = cfg.id == "Hold" or e["schedule"] == "hold"
    tasks = [(name, make, k, sched) for name, make in factories for k, sched in enumerate(schedules)]

    def run(task):
        name, make, k, sched = task
        n_steps = ev.schedule_steps(sched, cfg.dt, e["hold"])
        if e["steps"]:
            n_steps = min(n_steps, e["steps"])
        record, report = ev.run_test(make(), cfg, sched, rc.seed, n_steps=n_steps, test=cfg.id,
                                     hold_mode=hold_mode)
        stem = f"{name}_{cfg.id}_{e['schedule']}{k}_seed{rc.seed}"
        record.to_csv(traj_dir / f"{stem}.csv")
        report.to_csv(traj_dir / f"{stem}_report.csv")
        return report

    if e["jobs"] > 1:
        with ThreadPoolExecutor(max_workers=e["jobs"]) as pool:
            reports = list(pool.map(run, tasks))
    else:
        reports = [run(t) for t in tasks]
    table = ev.compare(reports)
    table.to_csv(out / "report.csv")
    print(table.to_text(), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    sections = load_file(args.config) if args.config else {}
    flags = _flags(args)
    env_keys = {**sections.get("environment", {}), **flags.get("environment", {})}
    fluid_keys = {k: v for k, v in env_keys.items() if k in ("poisson_tol", "poisson_max_iter", "rho")}
    try:
        params = FluidParams(**fluid_keys)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    results = verify.run_all(params, quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {"train": cmd_train, "dataset": cmd_dataset, "train-supervised": cmd_train_supervised,
            "eval": cmd_eval, "verify": cmd_verify}


def _report_warnings(caught) -> None:
    """One stderr line per warning category instead of one per occurrence."""
    by_cat: dict[str, list] = {}
    for w in caught:
        by_cat.setdefault(w.category.__name__, []).append(str(w.message))
    for cat, msgs in by_cat.items():
        print(f"fluidctl: {cat} x{len(msgs)} (first: {msgs[0]})", file=sys.stderr)


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_CONFIG
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                return COMMANDS[args.command](args)
            finally:
                _report_warnings(caught)
    except ConfigError as exc:
        print(f"fluidctl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures of the numerical work
        print(f"fluidctl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
