"""Supervised warm starts: regress initial costates on boundary conditions.

A single-segment model holds one network mapping ``[x0, xf, tf]`` to
``lambda0``.  A segmented model holds one network per segment of a shared
topology; predictions are turned into a :class:`SegmentPlan` against the
requested ``tf``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dataset import (DatasetManifest, LabeledRecord, SegmentTopology, arrays,
                      segment_plan_for)
from .errors import ConfigurationError, SolveError, ValidationError
from .nn import Mlp, TrainConfig, TrainLog, load_net, save_net, train_regression
from .problems import BoundaryConditionSet, OcpDefinition
from .serialization import write_json
from .shooting import (DEFAULT_STEPS, CostateGuess, SegmentPlan, Trajectory, boundary_residual,
                       rollout, rollout_segmented)

log = logging.getLogger(__name__)

TOPOLOGY_FILE = "topology.json"
MODEL_FORMAT = "hjblearn.slh"
OOD_FACTOR = 2.0


@dataclass
class ArchitectureSpec:
    """Hidden layer widths and activations; the output layer is ``output``."""

    hidden: Tuple[int, ...] = (10, 10)
    activation: str = "tansig"
    output: str = "linear"

    def sizes(self, n_in: int, n_out: int) -> List[int]:
        return [n_in, *[int(h) for h in self.hidden], n_out]

    def activations(self) -> List[str]:
        return [self.activation] * len(self.hidden) + [self.output]


def default_train_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(optimizer="lm", epochs=300, seed=seed, target_mse=1e-14)


@dataclass
class SlhModel:
    problem_id: str
    nets: List[Mlp]
    in_low: np.ndarray
    in_high: np.ndarray
    topology: Optional[SegmentTopology] = None
    equilibrium: Optional[np.ndarray] = None

    def __post_init__(self):
        self.in_low = np.asarray(self.in_low, dtype=float)
        self.in_high = np.asarray(self.in_high, dtype=float)
        if not self.nets:
            raise ValidationError("a model needs at least one network")
        dims = {(n.input_dim, n.output_dim) for n in self.nets}
        if len(dims) != 1:
            raise ValidationError("all segment networks must share input/output sizes")
        if self.topology is not None:
            if len(self.nets) != self.topology.n_segments:
                raise ValidationError(f"topology has {self.topology.n_segments} segments "
                                      f"but {len(self.nets)} networks were given")
            if self.equilibrium is None:
                raise ValidationError("a segmented model needs the equilibrium point")
            self.equilibrium = np.asarray(self.equilibrium, dtype=float)
        elif len(self.nets) != 1:
            raise ValidationError("several networks need a segment topology")

    @property
    def segmented(self) -> bool:
        return self.topology is not None

    @property
    def input_dim(self) -> int:
        return self.nets[0].input_dim


@dataclass
class Prediction:
    """Network output for one boundary set.

    Exactly one of ``guess`` and ``plan`` is set.  ``warnings`` notes
    boundary values far outside the training box.
    """

    guess: Optional[CostateGuess] = None
    plan: Optional[SegmentPlan] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def out_of_distribution(self) -> bool:
        return bool(self.warnings)


@dataclass
class SolveResult:
    trajectory: Trajectory
    residual: float
    objective: float
    prediction: Prediction
    wall_time: float


def _check_records(problem: OcpDefinition, records: Sequence[LabeledRecord]) -> None:
    if not records:
        raise ValidationError("dataset is empty")
    for i, r in enumerate(records):
        if r.problem_id != problem.name:
            raise ValidationError(f"record {i} belongs to {r.problem_id!r}, "
                                  f"not {problem.name!r}")
        if r.input.shape != (2 * problem.state_dim + 1,):
            raise ValidationError(f"record {i}: input has shape {r.input.shape}")


def _fit_one(x_tr, y_tr, x_te, y_te, low, high, arch: ArchitectureSpec, cfg: TrainConfig,
             seed: int) -> Tuple[Mlp, TrainLog]:
    rng = np.random.default_rng(seed)
    net = Mlp.create(arch.sizes(x_tr.shape[1], y_tr.shape[1]), arch.activations(), rng)
    net.set_input_range(low, high)
    # standardize targets so the fit is scale-free
    offset = y_tr.mean(axis=0)
    scale = y_tr.std(axis=0)
    net.set_output_affine(offset, np.where(scale > 0, scale, 1.0))
    return net, train_regression(net, (x_tr, y_tr), (x_te, y_te), replace(cfg, seed=seed))


def _input_box(x_tr: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return x_tr.min(axis=0), x_tr.max(axis=0)


def train_slh(problem: OcpDefinition, train: Sequence[LabeledRecord],
              test: Sequence[LabeledRecord] = (), arch: Optional[ArchitectureSpec] = None,
              cfg: Optional[TrainConfig] = None) -> Tuple[SlhModel, TrainLog]:
    """Fit one network from boundary vectors to single-segment labels.

    Raises
    ------
    ValidationError
        If records belong to another problem or carry segmented labels.
    """
    arch = arch or ArchitectureSpec()
    cfg = cfg or default_train_config()
    _check_records(problem, train)
    if any(r.segmented for r in list(train) + list(test)):
        raise ValidationError("train_slh needs single-segment labels; "
                              "use train_slh_segmented")
    x_tr, y_tr = arrays(train)
    x_te, y_te = arrays(test) if test else (x_tr[:0], y_tr[:0])
    low, high = _input_box(x_tr)
    net, tlog = _fit_one(x_tr, y_tr, x_te, y_te, low, high, arch, cfg, cfg.seed)
    return SlhModel(problem.name, [net], low, high), tlog


def train_slh_segmented(problem: OcpDefinition, train: Sequence[LabeledRecord],
                        test: Sequence[LabeledRecord], manifest: DatasetManifest,
                        arch: Optional[ArchitectureSpec] = None,
                        cfg: Optional[TrainConfig] = None) -> Tuple[SlhModel, List[TrainLog]]:
    """Fit one independent network per segment of the manifest topology.

    Network ``k`` is seeded with ``cfg.seed + k``.
    """
    arch = arch or ArchitectureSpec()
    cfg = cfg or default_train_config()
    _check_records(problem, train)
    topo = manifest.topology
    if topo is None:
        raise ValidationError("manifest has no segment topology")
    for i, r in enumerate(list(train) + list(test)):
        if r.label.shape != (topo.n_segments, problem.state_dim):
            raise ValidationError(f"record {i}: label shape {r.label.shape} does not match "
                                  f"{topo.n_segments} segments")
    pe = np.mean([np.asarray(r.meta["p_e"], dtype=float) for r in train], axis=0)
    x_tr, _ = arrays(train)
    low, high = _input_box(x_tr)
    nets, logs = [], []
    for k in range(topo.n_segments):
        _, y_tr = arrays(train, segment=k)
        if test:
            x_te, y_te = arrays(test, segment=k)
        else:
            x_te, y_te = x_tr[:0], y_tr[:0]
        net, tlog = _fit_one(x_tr, y_tr, x_te, y_te, low, high, arch, cfg, cfg.seed + k)
        log.info("segment %d: best test mse %.3e", k, tlog.best_test_mse)
        nets.append(net)
        logs.append(tlog)
    return SlhModel(problem.name, nets, low, high, topo, pe), logs


def _ood_warnings(model: SlhModel, v: np.ndarray) -> List[str]:
    mid = 0.5 * (model.in_low + model.in_high)
    half = OOD_FACTOR * 0.5 * (model.in_high - model.in_low)
    out = np.abs(v - mid) > half + 1e-12 * np.maximum(1.0, np.abs(mid))
    return [f"input {i} = {v[i]:g} lies outside {OOD_FACTOR:g}x the training box "
            f"[{model.in_low[i]:g}, {model.in_high[i]:g}]" for i in np.flatnonzero(out)]


def predict(model: SlhModel, bc: BoundaryConditionSet) -> Prediction:
    v = bc.as_vector()
    if v.shape != (model.input_dim,):
        raise ValidationError(f"model expects {model.input_dim} boundary values, got {v.size}")
    warnings = _ood_warnings(model, v)
    for w in warnings:
        log.warning(w)
    if not model.segmented:
        return Prediction(guess=CostateGuess(model.nets[0](v)), warnings=warnings)
    labels = np.stack([net(v) for net in model.nets])
    plan = segment_plan_for(model.topology, bc, labels, model.equilibrium)
    return Prediction(plan=plan, warnings=warnings)


def solve(model: SlhModel, problem: OcpDefinition, bc: BoundaryConditionSet,
          steps: int = DEFAULT_STEPS, steps_per_segment: int = 500) -> SolveResult:
    """Predict the costate(s) and roll the coupled field forward.

    Raises
    ------
    SolveError
        If the rollout diverges; the prediction is attached.
    """
    if model.problem_id != problem.name:
        raise ValidationError(f"model is for {model.problem_id!r}, not {problem.name!r}")
    t0 = time.perf_counter()
    pred = predict(model, bc)
    if pred.plan is not None:
        traj = rollout_segmented(problem, bc, pred.plan, steps_per_segment)
    else:
        traj = rollout(problem, bc, pred.guess, steps)
    elapsed = time.perf_counter() - t0
    if not traj.completed:
        raise SolveError(f"rollout {traj.status} for bc {bc.as_vector().tolist()}", pred)
    return SolveResult(traj, boundary_residual(traj, bc), traj.objective, pred, elapsed)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: SlhModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for k, net in enumerate(model.nets):
        name = f"net_{k:02d}.json"
        save_net(net, directory / name)
        files.append(name)
    write_json(directory / TOPOLOGY_FILE, {
        "format": MODEL_FORMAT,
        "problem_id": model.problem_id,
        "nets": files,
        "input_low": model.in_low,
        "input_high": model.in_high,
        "topology": model.topology.to_dict() if model.topology is not None else None,
        "equilibrium": model.equilibrium,
    })


def load_model(directory) -> SlhModel:
    directory = Path(directory)
    path = directory / TOPOLOGY_FILE
    try:
        with open(path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if meta.get("format") != MODEL_FORMAT:
        raise ValidationError(f"{path}: not an SLH model (format {meta.get('format')!r})")
    try:
        nets = [load_net(directory / name) for name in meta["nets"]]
        topo = meta.get("topology")
        return SlhModel(meta["problem_id"], nets, meta["input_low"], meta["input_high"],
                        SegmentTopology.from_dict(topo) if topo else None,
                        meta.get("equilibrium"))
    except (KeyError, TypeError, ConfigurationError) as exc:
        raise ValidationError(f"{path}: malformed model ({exc})") from None
