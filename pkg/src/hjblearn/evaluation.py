"""Evaluation reports and CSV export of logs and trajectories."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .dataset import LabeledRecord
from .errors import SolveError, UsageError
from .nn import TrainLog
from .oracle import PhaseSplit
from .problems import OcpDefinition
from .rlh import LOG_COLUMNS, EpisodeLog
from .serialization import atomic_write_text
from .shooting import Trajectory

SUCCESS_THRESHOLD = {"brachistochrone": 1e-3, "hypersensitive": 1e-2}
REPORT_COLUMNS = ("case", "residual", "objective", "wall_time", "success")


def _g(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class EvalCase:
    case: int
    residual: float
    objective: float
    wall_time: float


@dataclass
class EvalReport:
    threshold: float
    cases: List[EvalCase] = field(default_factory=list)

    def _col(self, name) -> np.ndarray:
        return np.array([getattr(c, name) for c in self.cases], dtype=float)

    def successes(self) -> np.ndarray:
        return self._col("residual") < self.threshold

    @property
    def success_fraction(self) -> float:
        return float(np.mean(self.successes())) if self.cases else 0.0

    @property
    def mean_residual(self) -> float:
        return float(np.mean(self._col("residual"))) if self.cases else math.nan

    @property
    def max_residual(self) -> float:
        return float(np.max(self._col("residual"))) if self.cases else math.nan

    @property
    def mean_objective(self) -> float:
        return float(np.mean(self._col("objective"))) if self.cases else math.nan

    @property
    def mean_wall_time(self) -> float:
        return float(np.mean(self._col("wall_time"))) if self.cases else math.nan

    def to_csv(self) -> str:
        """One row per case plus a final ``mean`` row (success column = fraction)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for c, ok in zip(self.cases, self.successes()):
            w.writerow([c.case, _g(c.residual), _g(c.objective), _g(c.wall_time), int(ok)])
        w.writerow(["mean", _g(self.mean_residual), _g(self.mean_objective),
                    _g(self.mean_wall_time), _g(self.success_fraction)])
        return buf.getvalue()


def evaluate(model, problem: OcpDefinition, records: Sequence[LabeledRecord],
             threshold: Optional[float] = None) -> EvalReport:
    """Solve every record's boundary set with ``model``; diverged solves score ``inf``."""
    from .slh import solve

    if threshold is None:
        threshold = SUCCESS_THRESHOLD.get(problem.name, 1e-3)
    report = EvalReport(float(threshold))
    for i, rec in enumerate(records):
        t0 = time.perf_counter()
        try:
            res = solve(model, problem, rec.bc(problem.state_dim))
            report.cases.append(EvalCase(i, res.residual, res.objective, res.wall_time))
        except SolveError:
            report.cases.append(EvalCase(i, math.inf, math.nan, time.perf_counter() - t0))
    return report


# ---------------------------------------------------------------------------
# plot data


def training_log_csv(tlog: TrainLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "train_mse", "test_mse"))
    for epoch, tr, te in tlog.rows():
        w.writerow([epoch, _g(tr), _g(te)])
    return buf.getvalue()


def trajectory_csv(traj: Trajectory, split: Optional[PhaseSplit] = None) -> str:
    """Columns ``t, x*, lambda*, u*, marker``; phase boundaries become marker rows."""
    if len(traj.times) == 0:
        raise UsageError("trajectory is empty")
    n, m = traj.states.shape[1], traj.controls.shape[1]
    names = (["t"] + [f"x{i}" for i in range(n)] + [f"lambda{i}" for i in range(n)]
             + [f"u{i}" for i in range(m)] + ["marker"])
    rows = [(float(t), [_g(t), *map(_g, x), *map(_g, l), *map(_g, u), ""])
            for t, x, l, u in zip(traj.times, traj.states, traj.costates, traj.controls)]
    if split is not None:
        blank = [""] * (2 * n + m)
        rows.append((split.t_ib, [_g(split.t_ib), *blank, "stable_end"]))
        rows.append((split.t_fb, [_g(split.t_fb), *blank, "unstable_start"]))
        # stable sort keeps markers after samples at the same time
        rows.sort(key=lambda r: r[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    w.writerows(r for _, r in rows)
    return buf.getvalue()


def export_plot_data(data, path, split: Optional[PhaseSplit] = None) -> None:
    """Write a training log, episode log or trajectory as CSV."""
    if isinstance(data, TrainLog):
        if not data.epochs:
            raise UsageError("training log is empty")
        text = training_log_csv(data)
    elif isinstance(data, EpisodeLog):
        if not data.episode:
            raise UsageError("episode log is empty")
        text = data.to_csv()
    elif isinstance(data, Trajectory):
        text = trajectory_csv(data, split)
    else:
        raise UsageError(f"cannot export {type(data).__name__}")
    atomic_write_text(path, text)


EPISODE_COLUMNS = LOG_COLUMNS
