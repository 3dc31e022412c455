"""Command-line entry point: ``hjblearn <command> [options]``.

Every command prints one ``key=value`` summary line on success.  Exit status
is 0 on success, 1 when a pipeline step fails and 2 for usage errors such as
a missing input path.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import fields, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np

from . import dataset as ds
from .errors import ConfigurationError, HjbError, UsageError
from .evaluation import evaluate, export_plot_data
from .nn import TrainConfig
from .oracle import PhaseSplit
from .problems import PROBLEMS, BoundaryConditionSet, get_problem
from .rlh import BcSampler, RlhConfig, learning_signal, save_agent, train_rlh
from .serialization import atomic_write_text, write_json
from .shooting import boundary_residual, rollout, rollout_segmented
from .slh import (ArchitectureSpec, default_train_config, load_model, save_model, solve,
                  train_slh, train_slh_segmented)

log = logging.getLogger("hjblearn")

PROFILE_SAMPLES = {
    "paper": {"brachistochrone": 2100, "hypersensitive": 300},
    "smoke": {"brachistochrone": 200, "hypersensitive": 30},
}
SLH_PROFILE_EPOCHS = {"paper": 300, "smoke": 50}
TRAIN_META = "train_meta.json"


class MissingPathError(UsageError):
    pass


def _summary(**items) -> None:
    parts = []
    for k, v in items.items():
        if isinstance(v, float):
            v = format(v, ".6g")
        parts.append(f"{k}={v}")
    print(" ".join(parts))


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingPathError(f"{what} not found: {p}")
    return p


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = _require(path, "config file")
    try:
        with open(p, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{p}: expected a JSON object")
    return cfg


@contextmanager
def _staged_dir(out: Path) -> Iterator[Path]:
    """Build a directory under a temporary sibling name; rename it into place on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    os.chmod(tmp, 0o755)
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def _bc_from_args(values: Optional[Sequence[float]], problem) -> BoundaryConditionSet:
    if values is None:
        return problem.default_bc
    return BoundaryConditionSet.from_vector(np.asarray(values, dtype=float), problem.state_dim)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _read_config(args.config)
    if cfg:
        cfg.setdefault("problem_id", args.problem)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.n is not None:
            cfg["sample_count"] = args.n
        manifest = ds.DatasetManifest.from_dict(cfg)
    else:
        if args.problem is None:
            raise UsageError("gen-data needs --problem or --config")
        n = args.n if args.n is not None else PROFILE_SAMPLES[args.profile][args.problem]
        manifest = ds.DatasetManifest.default(args.problem, n, seed=args.seed or 0)
    result = ds.generate(manifest)
    data_path, manifest_path = ds.dataset_paths(args.out)
    with _staged_dir(Path(args.out)) as tmp:
        ds.save(result.records, tmp / data_path.name)
        manifest.save(tmp / manifest_path.name)
    _summary(command="gen-data", problem=manifest.problem_id, requested=manifest.sample_count,
             records=len(result.records), oracle_failures=result.failed_labels,
             verification_failures=result.failed_verification, out=args.out)
    return 0


def _load_dataset(path):
    directory = _require(path, "dataset directory")
    data_path, manifest_path = ds.dataset_paths(directory)
    _require(data_path, "dataset file")
    _require(manifest_path, "dataset manifest")
    manifest = ds.DatasetManifest.load(manifest_path)
    return ds.load(data_path, manifest.problem_id), manifest


def cmd_verify_dataset(args) -> int:
    records, manifest = _load_dataset(args.data)
    report = ds.verify_dataset(records, manifest)
    worst = float(report.residuals.max()) if len(report.residuals) else 0.0
    _summary(command="verify-dataset", records=len(records), failures=report.failures,
             max_residual=worst, tolerance=report.tolerance)
    return 0 if report.passed else 1


def _slh_train_config(cfg: dict, seed: int, profile: str):
    known = {f.name for f in fields(TrainConfig)}
    train_keys = {k: v for k, v in cfg.items() if k in known}
    base = default_train_config(seed)
    base = replace(base, epochs=SLH_PROFILE_EPOCHS[profile])
    train = replace(base, **train_keys, seed=seed)
    arch = ArchitectureSpec(tuple(cfg.get("hidden", ArchitectureSpec.hidden)),
                            cfg.get("activation", ArchitectureSpec.activation),
                            cfg.get("output", ArchitectureSpec.output))
    unknown = set(cfg) - known - {"hidden", "activation", "output"}
    if unknown:
        raise ConfigurationError(f"unknown train-slh settings: {sorted(unknown)}")
    return arch, train


def cmd_train_slh(args) -> int:
    records, manifest = _load_dataset(args.data)
    arch, tcfg = _slh_train_config(_read_config(args.config), args.seed, args.profile)
    problem = get_problem(manifest.problem_id)
    train, test = ds.split(records, manifest.split, seed=args.seed)
    with _staged_dir(Path(args.out)) as tmp:
        if manifest.segmented:
            model, logs = train_slh_segmented(problem, train, test, manifest, arch, tcfg)
            for k, tlog in enumerate(logs):
                export_plot_data(tlog, tmp / f"train_log_{k:02d}.csv")
            best = [tlog.best_test_mse for tlog in logs]
        else:
            model, tlog = train_slh(problem, train, test, arch, tcfg)
            export_plot_data(tlog, tmp / "train_log.csv")
            best = [tlog.best_test_mse]
        save_model(model, tmp)
        write_json(tmp / TRAIN_META, {"seed": args.seed, "split": list(manifest.split),
                                      "train_records": len(train), "test_records": len(test),
                                      "hidden": list(arch.hidden), "epochs": tcfg.epochs,
                                      "optimizer": tcfg.optimizer})
    _summary(command="train-slh", problem=problem.name, nets=len(model.nets), train=len(train),
             test=len(test), first_test_mse=best[0], worst_test_mse=max(best), out=args.out)
    return 0


def cmd_train_rlh(args) -> int:
    hyper = _read_config(args.hyper)
    problem = get_problem(args.problem)
    if args.episodes is not None:
        hyper["episodes"] = args.episodes
    hyper["seed"] = args.seed
    cfg = RlhConfig.profile(args.profile, **hyper)
    bc = _bc_from_args(args.bc, problem)
    result = train_rlh(problem, BcSampler.fixed(bc), cfg)
    traj = rollout(problem, bc, result.best_action, cfg.steps)
    first, last = learning_signal(result.rewards)
    with _staged_dir(Path(args.out)) as tmp:
        save_agent(result, tmp, problem.name)
    _summary(command="train-rlh", problem=problem.name, episodes=cfg.episodes,
             best_action=float(result.best_action[0]), best_reward=result.best_reward,
             best_residual=boundary_residual(traj, bc), first_mean_reward=first,
             last_mean_reward=last, out=args.out)
    return 0


def _model_split(model, bc):
    if model.topology is None:
        return None
    topo = model.topology
    return PhaseSplit(topo.stable_fraction * bc.tf, topo.unstable_fraction * bc.tf,
                      model.equilibrium)


def cmd_solve(args) -> int:
    model = load_model(_require(args.model, "model directory"))
    problem = get_problem(model.problem_id)
    bc = _bc_from_args(args.bc, problem)
    res = solve(model, problem, bc)
    if args.out:
        export_plot_data(res.trajectory, args.out, _model_split(model, bc))
    _summary(command="solve", problem=problem.name, residual=res.residual, J=res.objective,
             wall_time=res.wall_time, out_of_distribution=int(res.prediction.out_of_distribution),
             out=args.out or "-")
    return 0


def cmd_eval(args) -> int:
    model_dir = _require(args.model, "model directory")
    model = load_model(model_dir)
    records, manifest = _load_dataset(args.data)
    if manifest.problem_id != model.problem_id:
        raise UsageError(f"dataset is for {manifest.problem_id}, model for {model.problem_id}")
    problem = get_problem(model.problem_id)
    if args.subset == "test":
        seed = args.seed
        if seed is None and (model_dir / TRAIN_META).exists():
            with open(model_dir / TRAIN_META, encoding="utf-8") as fh:
                seed = int(json.load(fh)["seed"])
        _, records = ds.split(records, manifest.split, seed=seed or 0)
    report = evaluate(model, problem, records, args.threshold)
    atomic_write_text(args.out, report.to_csv())
    _summary(command="eval", problem=problem.name, cases=len(report.cases),
             success_fraction=report.success_fraction, mean_residual=report.mean_residual,
             max_residual=report.max_residual, threshold=report.threshold, out=args.out)
    return 0


def cmd_export(args) -> int:
    if args.model is not None:
        model = load_model(_require(args.model, "model directory"))
        problem = get_problem(model.problem_id)
        bc = _bc_from_args(args.bc, problem)
        traj = solve(model, problem, bc).trajectory
        split = _model_split(model, bc)
        source = "model"
    elif args.data is not None:
        records, manifest = _load_dataset(args.data)
        if not 0 <= args.index < len(records):
            raise UsageError(f"record index {args.index} out of range (0..{len(records) - 1})")
        rec = records[args.index]
        problem = get_problem(manifest.problem_id)
        bc = rec.bc(problem.state_dim)
        if rec.segmented:
            plan = ds.segment_plan_for(manifest.topology, bc, rec.label, rec.meta["p_e"])
            traj = rollout_segmented(problem, bc, plan, manifest.steps_per_segment)
            split = PhaseSplit(rec.meta["t_ib"], rec.meta["t_fb"],
                               np.asarray(rec.meta["p_e"], dtype=float))
        else:
            traj = rollout(problem, bc, rec.label, manifest.steps)
            split = None
        source = "dataset"
    else:
        raise UsageError("export needs --model or --data")
    export_plot_data(traj, args.out, split)
    _summary(command="export", source=source, rows=len(traj.times),
             residual=boundary_residual(traj, bc), markers=int(split is not None),
             out=args.out)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
    p.add_argument("--config", help="JSON file with command settings")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--profile", choices=("paper", "smoke"), default="paper")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hjblearn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    problems = sorted(PROBLEMS)

    p = sub.add_parser("gen-data", help="sample and label a dataset")
    _common(p)
    p.add_argument("--problem", choices=problems)
    p.add_argument("--n", type=int, help="number of samples (overrides the profile)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("verify-dataset", help="re-roll every label and check residuals")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_verify_dataset)

    p = sub.add_parser("train-slh", help="train the supervised regressor(s)")
    _common(p, seed_required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output model directory")
    p.set_defaults(func=cmd_train_slh)

    p = sub.add_parser("train-rlh", help="train the DDPG agent on one boundary set")
    _common(p, seed_required=True)
    p.add_argument("--problem", choices=problems, required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--hyper", help="JSON file of DDPG hyperparameters")
    p.add_argument("--bc", type=float, nargs="+", help="x0... xf... tf")
    p.add_argument("--out", required=True, help="output agent directory")
    p.set_defaults(func=cmd_train_rlh)

    p = sub.add_parser("solve", help="warm-start and roll out one boundary set")
    p.add_argument("--model", required=True)
    p.add_argument("--bc", type=float, nargs="+", help="x0... xf... tf")
    p.add_argument("--out", help="trajectory CSV")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="solve a dataset and write a residual report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", choices=("test", "all"), default="test")
    p.add_argument("--seed", type=int, help="split seed (default: the training seed)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True, help="report CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write trajectory plot data as CSV")
    p.add_argument("--model")
    p.add_argument("--bc", type=float, nargs="+")
    p.add_argument("--data")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"hjblearn {args.command}: {exc}", file=sys.stderr)
        return 2
    except (HjbError, OSError) as exc:
        print(f"hjblearn {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
