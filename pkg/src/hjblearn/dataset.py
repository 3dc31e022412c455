"""Oracle-labeled boundary-condition datasets.

A record maps the boundary vector ``[x0..., xf..., tf]`` to either one
initial costate (single-segment problems) or one costate per segment
(hypersensitive problems).  Records are stored as JSON lines::

    {"problem": "brachistochrone", "input": [...], "label": [...], "meta": {...}}

with every float written to 17 significant digits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (ConfigurationError, HjbError, InfeasibleGeometryError, LabelingError,
                     ValidationError)
from .oracle import (PhaseSplit, cycloid_initial_costate, extract_segment_labels,
                     label_hypersensitive_batch, polish_unstable_labels, solve_cycloid_bc,
                     split_phases)
from .problems import BoundaryConditionSet, OcpDefinition, get_problem
from .serialization import atomic_write_text, dumps, read_json, write_json
from .shooting import (DEFAULT_STEPS, CostateGuess, SegmentPlan, boundary_residual, rollout,
                       rollout_batch, rollout_segmented)

log = logging.getLogger(__name__)

LABEL_TOLERANCE = {"brachistochrone": 1e-6, "hypersensitive": 1e-4}

# per input component, in boundary-vector order [x0, xf, tf]
DEFAULT_RANGES = {
    # y0 fixed at the release point; yf depth and horizontal distance vary
    "brachistochrone": [(0.0, 0.0), (0.5, 2.0), (0.5, 2.0)],
    "hypersensitive": [(1.0, 1.0), (0.5, 2.0), (20.0, 26.0)],
}

SEGMENTED_PROBLEMS = ("hypersensitive",)
MAX_FAILURE_RATE = 0.5


def input_names(state_dim: int) -> List[str]:
    if state_dim == 1:
        return ["x0", "xf", "tf"]
    return ([f"x0[{i}]" for i in range(state_dim)] + [f"xf[{i}]" for i in range(state_dim)]
            + ["tf"])


@dataclass
class SegmentTopology:
    """Phase boundaries as fractions of ``tf`` shared by every record."""

    n_per_phase: int
    stable_fraction: float
    unstable_fraction: float

    def __post_init__(self):
        if int(self.n_per_phase) < 1:
            raise ConfigurationError("n_per_phase must be >= 1")
        if not 0.0 < self.stable_fraction < self.unstable_fraction < 1.0:
            raise ConfigurationError(
                f"need 0 < stable_fraction < unstable_fraction < 1, got "
                f"{self.stable_fraction}, {self.unstable_fraction}")
        self.n_per_phase = int(self.n_per_phase)

    @property
    def n_segments(self) -> int:
        return 2 * self.n_per_phase + 1

    def boundaries(self, tf: float) -> np.ndarray:
        from .oracle import segment_boundaries
        return segment_boundaries(self.stable_fraction * tf, self.unstable_fraction * tf, tf,
                                  self.n_per_phase)

    def to_dict(self) -> dict:
        return {"n_per_phase": self.n_per_phase, "stable_fraction": self.stable_fraction,
                "unstable_fraction": self.unstable_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentTopology":
        return cls(int(d["n_per_phase"]), float(d["stable_fraction"]),
                   float(d["unstable_fraction"]))


@dataclass
class DatasetManifest:
    """Everything needed to regenerate a dataset bit-for-bit."""

    problem_id: str
    sample_count: int
    ranges: List[Tuple[float, float]]
    seed: int = 0
    split: Tuple[float, float] = (0.8, 0.2)
    label_tolerance: Optional[float] = None
    steps: int = DEFAULT_STEPS
    n_per_phase: int = 6
    phase_epsilon: float = 1e-3
    steps_per_segment: int = 500
    topology: Optional[SegmentTopology] = None

    def __post_init__(self):
        self.ranges = [(float(lo), float(hi)) for lo, hi in self.ranges]
        self.split = tuple(float(f) for f in self.split)
        if self.label_tolerance is None:
            self.label_tolerance = LABEL_TOLERANCE.get(self.problem_id, 1e-6)
        self.validate()

    def validate(self) -> None:
        problem = get_problem(self.problem_id)
        n = problem.state_dim
        if len(self.ranges) != 2 * n + 1:
            raise ConfigurationError(
                f"{self.problem_id}: expected {2 * n + 1} input ranges "
                f"({', '.join(input_names(n))}), got {len(self.ranges)}")
        for name, (lo, hi) in zip(input_names(n), self.ranges):
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
                raise ConfigurationError(f"range for {name} is empty: [{lo}, {hi}]")
        if self.ranges[-1][0] <= 0:
            raise ConfigurationError("tf range must be positive")
        if int(self.sample_count) < 0:
            raise ConfigurationError("sample_count must be >= 0")
        if len(self.split) != 2 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-12:
            raise ConfigurationError(f"split fractions must be two values summing to 1, "
                                     f"got {self.split}")
        if not self.label_tolerance > 0:
            raise ConfigurationError("label_tolerance must be positive")

    @property
    def segmented(self) -> bool:
        return self.problem_id in SEGMENTED_PROBLEMS

    @property
    def low(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.ranges])

    @property
    def high(self) -> np.ndarray:
        return np.array([hi for _, hi in self.ranges])

    @classmethod
    def default(cls, problem_id: str, sample_count: int, seed: int = 0, **kwargs):
        get_problem(problem_id)
        return cls(problem_id, sample_count, list(DEFAULT_RANGES[problem_id]), seed, **kwargs)

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "sample_count": int(self.sample_count),
            "ranges": [list(r) for r in self.ranges],
            "seed": int(self.seed),
            "split": list(self.split),
            "label_tolerance": float(self.label_tolerance),
            "steps": int(self.steps),
            "n_per_phase": int(self.n_per_phase),
            "phase_epsilon": float(self.phase_epsilon),
            "steps_per_segment": int(self.steps_per_segment),
            "topology": self.topology.to_dict() if self.topology is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            topo = d.get("topology")
            return cls(
                problem_id=d["problem_id"],
                sample_count=int(d["sample_count"]),
                ranges=d["ranges"],
                seed=int(d.get("seed", 0)),
                split=tuple(d.get("split", (0.8, 0.2))),
                label_tolerance=d.get("label_tolerance"),
                steps=int(d.get("steps", DEFAULT_STEPS)),
                n_per_phase=int(d.get("n_per_phase", 6)),
                phase_epsilon=float(d.get("phase_epsilon", 1e-3)),
                steps_per_segment=int(d.get("steps_per_segment", 500)),
                topology=SegmentTopology.from_dict(topo) if topo else None,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed manifest: {exc}") from exc

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            return cls.from_dict(read_json(path))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: cannot parse manifest: {exc}") from exc


@dataclass
class LabeledRecord:
    problem_id: str
    input: np.ndarray
    label: np.ndarray
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.input = np.asarray(self.input, dtype=float)
        self.label = np.asarray(self.label, dtype=float)

    @property
    def segmented(self) -> bool:
        return self.label.ndim == 2

    def bc(self, state_dim: int) -> BoundaryConditionSet:
        return BoundaryConditionSet.from_vector(self.input, state_dim)

    def to_json(self) -> str:
        return dumps({"problem": self.problem_id, "input": self.input, "label": self.label,
                      "meta": self.meta})


@dataclass
class GenerationResult:
    records: List[LabeledRecord]
    manifest: DatasetManifest
    failed_labels: int = 0
    failed_verification: int = 0

    @property
    def requested(self) -> int:
        return int(self.manifest.sample_count)


def sample_inputs(manifest: DatasetManifest) -> np.ndarray:
    """Uniform draws inside the manifest box, one row per sample."""
    rng = np.random.default_rng(manifest.seed)
    u = rng.uniform(size=(int(manifest.sample_count), len(manifest.ranges)))
    return manifest.low + u * (manifest.high - manifest.low)


def segment_plan_for(topology: SegmentTopology, bc: BoundaryConditionSet, labels: np.ndarray,
                     p_e: np.ndarray) -> SegmentPlan:
    """Segment plan for one boundary set from per-segment costates."""
    return SegmentPlan(topology.boundaries(bc.tf), labels, None, pinned=topology.n_per_phase,
                       equilibrium=np.asarray(p_e, dtype=float))


def verify_record(problem: OcpDefinition, record: LabeledRecord,
                  manifest: DatasetManifest) -> float:
    """Terminal residual of the rollout driven by the record's label."""
    bc = record.bc(problem.state_dim)
    if record.segmented:
        if manifest.topology is None:
            raise ValidationError("segmented record needs a manifest topology")
        plan = segment_plan_for(manifest.topology, bc, record.label, record.meta["p_e"])
        traj = rollout_segmented(problem, bc, plan, manifest.steps_per_segment)
    else:
        traj = rollout(problem, bc, CostateGuess(record.label), manifest.steps)
    return boundary_residual(traj, bc)


def _check_failures(failed: int, total: int, manifest: DatasetManifest) -> None:
    if total and failed / total > MAX_FAILURE_RATE:
        box = ", ".join(f"{name}=[{lo:g}, {hi:g}]"
                        for name, (lo, hi) in zip(input_names(len(manifest.ranges) // 2),
                                                  manifest.ranges))
        raise LabelingError(
            f"oracle failed on {failed}/{total} samples (> {MAX_FAILURE_RATE:.0%}); "
            f"shrink the sampling box ({box})")


def _generate_brachistochrone(problem, manifest, inputs) -> GenerationResult:
    n = problem.state_dim
    labels, kept = [], []
    for i, v in enumerate(inputs):
        bc = BoundaryConditionSet.from_vector(v, n)
        try:
            sol = solve_cycloid_bc(bc, problem.params["gravity"])
        except InfeasibleGeometryError as exc:
            log.info("sample %d: %s", i, exc)
            continue
        guess = cycloid_initial_costate(sol, bc, problem, refine=True, steps=manifest.steps)
        if np.all(np.isfinite(guess.lambda0)):
            labels.append(guess.lambda0)
            kept.append(i)
    failed = len(inputs) - len(kept)
    _check_failures(failed, len(inputs), manifest)
    records, bad = [], 0
    if kept:
        x_start = np.stack([problem.initial_state(BoundaryConditionSet.from_vector(inputs[i], n))
                            for i in kept])
        res = rollout_batch(problem, x_start, np.array(labels), inputs[kept, -1], manifest.steps)
        resid = np.where(res.completed,
                         np.max(np.abs(res.final_states - inputs[kept, n:2 * n]), axis=1),
                         np.inf)
        for j, i in enumerate(kept):
            if resid[j] < manifest.label_tolerance:
                records.append(LabeledRecord(problem.name, inputs[i], labels[j],
                                             {"index": int(i), "residual": float(resid[j])}))
            else:
                bad += 1
    return GenerationResult(records, manifest, failed, bad)


def _generate_hypersensitive(problem, manifest, inputs) -> GenerationResult:
    n = problem.state_dim
    lam, ok = label_hypersensitive_batch(problem, inputs[:, :n], inputs[:, n:2 * n],
                                         inputs[:, -1], steps=manifest.steps)
    trajs, splits, kept = [], [], []
    for i in np.flatnonzero(ok):
        bc = BoundaryConditionSet.from_vector(inputs[i], n)
        traj = rollout(problem, bc, CostateGuess(lam[i]), manifest.steps)
        try:
            split = split_phases(problem, traj, manifest.phase_epsilon)
        except HjbError as exc:
            log.info("sample %d: %s", i, exc)
            continue
        trajs.append(traj)
        splits.append(split)
        kept.append(int(i))
    failed = len(inputs) - len(kept)
    _check_failures(failed, len(inputs), manifest)
    if not kept:
        return GenerationResult([], manifest, failed, 0)
    tf = inputs[kept, -1]
    topo = SegmentTopology(
        manifest.n_per_phase,
        float(np.mean([s.t_ib for s in splits] / tf)),
        float(np.mean([s.t_fb for s in splits] / tf)))
    manifest.topology = topo
    records, bad = [], 0
    for i, traj, split in zip(kept, trajs, splits):
        bc = BoundaryConditionSet.from_vector(inputs[i], n)
        common = PhaseSplit(topo.stable_fraction * bc.tf, topo.unstable_fraction * bc.tf,
                            split.p_e)
        plan = extract_segment_labels(problem, traj, common, topo.n_per_phase,
                                      keep_start_states=False)
        plan = polish_unstable_labels(problem, bc, plan, manifest.steps_per_segment)
        rec = LabeledRecord(problem.name, inputs[i], plan.guesses,
                            {"index": int(i), "p_e": split.p_e,
                             "t_ib": split.t_ib, "t_fb": split.t_fb})
        r = verify_record(problem, rec, manifest)
        if r < manifest.label_tolerance:
            rec.meta["residual"] = float(r)
            records.append(rec)
        else:
            bad += 1
    return GenerationResult(records, manifest, failed, bad)


def generate(manifest: DatasetManifest) -> GenerationResult:
    """Sample boundary sets, label them with the oracle and keep verified records.

    Raises
    ------
    LabelingError
        When the oracle fails on more than half of the samples.
    """
    problem = get_problem(manifest.problem_id)
    inputs = sample_inputs(manifest)
    if len(inputs) == 0:
        return GenerationResult([], manifest)
    if manifest.problem_id == "brachistochrone":
        result = _generate_brachistochrone(problem, manifest, inputs)
    elif manifest.problem_id == "hypersensitive":
        result = _generate_hypersensitive(problem, manifest, inputs)
    else:
        raise ConfigurationError(f"no oracle for problem {manifest.problem_id!r}")
    log.info("%s: %d/%d records kept (%d oracle failures, %d failed verification)",
             manifest.problem_id, len(result.records), len(inputs), result.failed_labels,
             result.failed_verification)
    return result


# ---------------------------------------------------------------------------
# persistence


def save(records: Sequence[LabeledRecord], path) -> None:
    text = "".join(r.to_json() + "\n" for r in records)
    atomic_write_text(path, text)


def _parse_line(lineno: int, line: str, expected_problem: Optional[str]) -> LabeledRecord:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"line {lineno}: not valid JSON ({exc.msg})") from None
    if not isinstance(d, dict):
        raise ValidationError(f"line {lineno}: expected a JSON object")
    for key in ("problem", "input", "label"):
        if key not in d:
            raise ValidationError(f"line {lineno}: missing key {key!r}")
    pid = d["problem"]
    if expected_problem is not None and pid != expected_problem:
        raise ValidationError(f"line {lineno}: problem {pid!r} differs from {expected_problem!r}")
    try:
        problem = get_problem(pid)
    except ConfigurationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None
    n = problem.state_dim
    inp = d["input"]
    if not isinstance(inp, list) or len(inp) != 2 * n + 1:
        raise ValidationError(f"line {lineno}: expected {2 * n + 1} values in input")
    label = d["label"]
    if not isinstance(label, list) or not label:
        raise ValidationError(f"line {lineno}: expected {n} values in label")
    rows = label if isinstance(label[0], list) else [label]
    for row in rows:
        if not isinstance(row, list) or len(row) != n:
            raise ValidationError(f"line {lineno}: expected {n} values")
    try:
        return LabeledRecord(pid, np.array(inp, dtype=float), np.array(label, dtype=float),
                             d.get("meta", {}) or {})
    except (TypeError, ValueError):
        raise ValidationError(f"line {lineno}: non-numeric values") from None


def load(path, problem_id: Optional[str] = None) -> List[LabeledRecord]:
    """Read a JSON-lines dataset; blank lines are skipped.

    Raises
    ------
    ValidationError
        Naming the 1-based line number of the first malformed record.
    """
    records = []
    shape = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = _parse_line(lineno, line, problem_id)
            if shape is None:
                shape = rec.label.shape
            elif rec.label.shape != shape:
                raise ValidationError(f"line {lineno}: expected {int(np.prod(shape))} values "
                                      f"(label shape {shape}), got shape {rec.label.shape}")
            records.append(rec)
    return records


def split(records: Sequence[LabeledRecord], fractions=(0.8, 0.2), seed: int = 0):
    """Deterministic shuffled train/test split."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 2 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-12:
        raise ConfigurationError(f"split fractions must be two values summing to 1, "
                                 f"got {fractions}")
    order = np.random.default_rng(seed).permutation(len(records))
    n_train = int(round(fractions[0] * len(records)))
    train = [records[i] for i in order[:n_train]]
    test = [records[i] for i in order[n_train:]]
    return train, test


def arrays(records: Sequence[LabeledRecord], segment: Optional[int] = None):
    """Stack inputs and labels; ``segment`` picks one row of segmented labels."""
    if not records:
        return np.zeros((0, 0)), np.zeros((0, 0))
    x = np.stack([r.input for r in records])
    if segment is None:
        y = np.stack([r.label for r in records])
    else:
        y = np.stack([r.label[segment] for r in records])
    return x, y


@dataclass
class VerificationReport:
    residuals: np.ndarray
    tolerance: float

    @property
    def failures(self) -> int:
        return int(np.sum(~(self.residuals < self.tolerance)))

    @property
    def passed(self) -> bool:
        return self.failures == 0


def verify_dataset(records: Sequence[LabeledRecord], manifest: DatasetManifest) -> VerificationReport:
    problem = get_problem(manifest.problem_id)
    resid = np.array([verify_record(problem, r, manifest) for r in records], dtype=float)
    return VerificationReport(resid, float(manifest.label_tolerance))


def dataset_paths(directory) -> Tuple[Path, Path]:
    directory = Path(directory)
    return directory / "dataset.jsonl", directory / "manifest.json"
