"""Reinforcement-learned warm starts: single-step DDPG over the initial costate.

Each episode is one step: the agent sees the boundary vector ``s``, proposes
``a = lambda0``, and receives the cost-like reward of the resulting rollout.
Lower reward is better, so the critic regresses the reward and the actor
descends ``dQ/da``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, TrainingError, ValidationError
from .nn import Adam, Mlp, load_net, save_net
from .ode import DEFAULT_DIVERGENCE_BOUND
from .problems import BoundaryConditionSet, OcpDefinition
from .serialization import atomic_write_text, write_json
from .shooting import DEFAULT_STEPS, CostateGuess, Trajectory, boundary_residual, rollout

log = logging.getLogger(__name__)

CASE_DIVERGED = "diverged"
CASE_FAR = "far"
CASE_NEAR = "near"
CASE_REACHED = "reached"

LOG_COLUMNS = ("episode", "mean_reward", "min_reward", "R_l", "sigma")
NET_FILES = ("actor.json", "critic.json", "actor_target.json", "critic_target.json")
HYPER_FILE = "hyper.json"


@dataclass
class RewardConfig:
    """Penalty levels and gap bounds of the piecewise reward."""

    n1: float = 100.0
    n2: float = 50.0
    l1: float = 0.5
    l2: float = 1e-2
    beta_f: float = 10.0
    divergence_bound: float = DEFAULT_DIVERGENCE_BOUND

    def __post_init__(self):
        if not 0 < self.l2 < self.l1:
            raise ConfigurationError(f"need 0 < L2 < L1, got L2={self.l2}, L1={self.l1}")
        if not self.n1 >= self.n2 > 0:
            raise ConfigurationError(f"need N1 >= N2 > 0, got N1={self.n1}, N2={self.n2}")
        if not self.beta_f > 0:
            raise ConfigurationError("beta_f must be positive")


def reward_case(residual: float, objective: float, cfg: RewardConfig) -> Tuple[float, str]:
    """Piecewise reward for a terminal miss ``residual`` and cost ``objective``."""
    if not (math.isfinite(residual) and math.isfinite(objective)):
        return cfg.n1, CASE_DIVERGED
    if residual > cfg.l1:
        return cfg.n2 + objective, CASE_FAR
    if residual > cfg.l2:
        return cfg.beta_f * residual + objective, CASE_NEAR
    return objective, CASE_REACHED


def reward(problem: OcpDefinition, bc: BoundaryConditionSet, action, cfg: RewardConfig,
           steps: int = DEFAULT_STEPS) -> Tuple[float, Trajectory]:
    guess = action if isinstance(action, CostateGuess) else CostateGuess(action)
    traj = rollout(problem, bc, guess, steps, cfg.divergence_bound)
    value, _ = reward_case(boundary_residual(traj, bc), traj.objective, cfg)
    return value, traj


# ---------------------------------------------------------------------------
# replay memory


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.r = float(self.r)


@dataclass
class TransitionBatch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray

    def __len__(self) -> int:
        return len(self.r)


class _Ring:
    """Fixed-capacity FIFO of equal-width rows."""

    def __init__(self, capacity: int, width: int):
        self.data = np.zeros((int(capacity), width))
        self.capacity = int(capacity)
        self.size = 0
        self.pos = 0

    def push(self, row: np.ndarray) -> None:
        if self.capacity == 0:
            return
        self.data[self.pos] = row
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def rows(self) -> np.ndarray:
        """Stored rows, oldest first."""
        if self.size < self.capacity:
            return self.data[:self.size]
        return np.roll(self.data, -self.pos, axis=0)


class ReplayMemory:
    """Main FIFO buffer plus the good-sample buffer of rewards below ``r_l``.

    Rows are stored as ``[s, a, r, R_l at insertion]``.
    """

    def __init__(self, capacity: int, good_capacity: int, state_dim: int, action_dim: int,
                 r_l: float, beta_l: float = 0.95, phi: float = 0.5):
        if int(capacity) < 1 or int(good_capacity) < 0:
            raise ConfigurationError("memory capacity must be >= 1 and good capacity >= 0")
        if not 0.0 < beta_l < 1.0:
            raise ConfigurationError("beta_l must lie in (0, 1)")
        if not 0.0 <= phi <= 1.0:
            raise ConfigurationError("phi must lie in [0, 1]")
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        width = self.state_dim + self.action_dim + 2
        self.main = _Ring(capacity, width)
        self.good = _Ring(good_capacity, width)
        self.r_l = float(r_l)
        self.beta_l = float(beta_l)
        self.phi = float(phi)

    def __len__(self) -> int:
        return self.main.size

    def remember(self, tr: Transition) -> bool:
        """Store ``tr``; returns True when it also entered the good buffer."""
        row = np.concatenate([tr.s, tr.a, [tr.r, self.r_l]])
        if not np.all(np.isfinite(row)):
            raise ValidationError("transitions must be finite")
        self.main.push(row)
        if tr.r < self.r_l:
            self.good.push(row)
            return True
        return False

    def decay_threshold(self) -> None:
        self.r_l *= self.beta_l

    def _split(self, rows: np.ndarray) -> TransitionBatch:
        ns, na = self.state_dim, self.action_dim
        return TransitionBatch(rows[:, :ns], rows[:, ns:ns + na], rows[:, ns + na])

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        """``floor(phi * batch)`` draws from the good buffer, the rest from main.

        Draws are uniform with replacement when a buffer holds fewer rows
        than its quota, without replacement otherwise.
        """
        if self.main.size == 0:
            raise ValidationError("cannot sample from an empty memory")
        batch_size = int(batch_size)
        n_good = int(math.floor(self.phi * batch_size)) if self.good.size else 0
        parts = []
        for ring, n in ((self.good, n_good), (self.main, batch_size - n_good)):
            if n == 0:
                continue
            idx = rng.choice(ring.size, size=n, replace=ring.size < n)
            parts.append(ring.data[idx])
        return self._split(np.concatenate(parts))

    def good_rows(self) -> TransitionBatch:
        return self._split(self.good.rows())

    def good_thresholds(self) -> np.ndarray:
        return self.good.rows()[:, -1]


# ---------------------------------------------------------------------------
# agent


@dataclass
class RlhConfig:
    """DDPG hyperparameters; every unstated constant is an explicit key."""

    episodes: int = 7000
    actor_lr: float = 0.005
    critic_lr: float = 0.01
    memory: int = 30000
    batch_size: int = 1000
    eta: float = 0.01
    gamma: float = 0.99
    good_capacity: int = 3000
    beta_l: float = 0.95
    r_l: Optional[float] = None
    phi: float = 0.5
    window: int = 50
    sigma_start: float = 0.3
    sigma_end: float = 0.01
    steps: int = DEFAULT_STEPS
    seed: int = 0
    action_low: Optional[List[float]] = None
    action_high: Optional[List[float]] = None
    reward: RewardConfig = field(default_factory=RewardConfig)

    def __post_init__(self):
        if isinstance(self.reward, dict):
            self.reward = RewardConfig(**self.reward)
        if int(self.episodes) < 1 or int(self.batch_size) < 1 or int(self.window) < 1:
            raise ConfigurationError("episodes, batch_size and window must be >= 1")
        if not 0.0 < self.eta <= 1.0:
            raise ConfigurationError(f"eta must lie in (0, 1], got {self.eta}")
        if not (self.actor_lr > 0 and self.critic_lr > 0):
            raise ConfigurationError("learning rates must be positive")
        if not 0.0 < self.sigma_end <= self.sigma_start:
            raise ConfigurationError("need 0 < sigma_end <= sigma_start")
        if self.r_l is None:
            # "a relatively large number": the large-gap penalty level
            self.r_l = self.reward.n2

    @classmethod
    def profile(cls, name: str, **overrides) -> "RlhConfig":
        if name == "paper":
            return cls(**overrides)
        if name == "smoke":
            base = {"episodes": 500, "batch_size": 64, "memory": 2000, "good_capacity": 500}
            return cls(**{**base, **overrides})
        raise ConfigurationError(f"unknown profile {name!r}; choose paper or smoke")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RlhConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


def sigma_schedule(episode: int, episodes: int, start: float, end: float) -> float:
    """Exponential decay from ``start`` at episode 0 to ``end`` at the last episode."""
    if episodes <= 1:
        return end
    frac = min(max(episode / (episodes - 1), 0.0), 1.0)
    return start * (end / start) ** frac


@dataclass
class BcSampler:
    """Uniform boundary vectors inside ``[low, high]``; equal bounds fix a component."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=float)
        self.high = np.asarray(self.high, dtype=float)
        if self.low.shape != self.high.shape or np.any(self.high < self.low):
            raise ConfigurationError("sampler bounds must match with high >= low")

    @classmethod
    def fixed(cls, bc: BoundaryConditionSet) -> "BcSampler":
        v = bc.as_vector()
        return cls(v, v.copy())

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if np.all(self.high == self.low):
            return self.low.copy()
        return self.low + rng.uniform(size=self.low.shape) * (self.high - self.low)


class DdpgAgent:
    """Local and target actor/critic pairs with Adam optimizers.

    Actor: ``dim_s -> 20 dim_s (sigmoid) -> 10 dim_s (tanh) -> dim_a`` with a
    tanh output scaled to the action box.  Critic: the same hidden layers on
    ``[s, a]`` with a linear output.
    """

    def __init__(self, state_dim: int, action_low, action_high, state_low, state_high,
                 cfg: RlhConfig, rng: np.random.Generator):
        self.action_low = np.asarray(action_low, dtype=float)
        self.action_high = np.asarray(action_high, dtype=float)
        if not (np.all(np.isfinite(self.action_low)) and np.all(np.isfinite(self.action_high))
                and np.all(self.action_high > self.action_low)):
            raise ConfigurationError("action box must be finite with high > low")
        self.cfg = cfg
        ds, da = int(state_dim), self.action_low.size
        self.state_dim, self.action_dim = ds, da
        hidden = [20 * ds, 10 * ds]
        # one scaled output layer per channel is equivalent to a shared range when da == 1
        if da != 1:
            raise ConfigurationError("the actor output layer supports one costate channel")
        box = (float(self.action_low[0]), float(self.action_high[0]))
        self.actor = Mlp.create([ds, *hidden, da], ["sigmoid", "tanh", "scaled_tanh"], rng,
                                [None, None, box])
        self.critic = Mlp.create([ds + da, *hidden, 1], ["sigmoid", "tanh", "linear"], rng)
        self.actor.set_input_range(state_low, state_high)
        self.critic.set_input_range(np.concatenate([state_low, self.action_low]),
                                    np.concatenate([state_high, self.action_high]))
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.n_params, cfg.actor_lr)
        self.critic_opt = Adam(self.critic.n_params, cfg.critic_lr)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.action_high - self.action_low)

    def act(self, s, sigma: float = 0.0, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Actor output plus Gaussian noise of std ``sigma * half_width``, clipped to the box."""
        a = self.actor(np.asarray(s, dtype=float))
        if sigma > 0:
            if rng is None:
                raise ConfigurationError("exploration needs a random generator")
            a = a + sigma * self.half_width * rng.standard_normal(a.shape)
        return np.clip(a, self.action_low, self.action_high)

    def critic_loss(self, batch: TransitionBatch) -> float:
        q = self.critic(np.hstack([batch.s, batch.a]))[:, 0]
        return float(np.mean((batch.r - q) ** 2))

    def critic_gradient(self, batch: TransitionBatch) -> Tuple[float, np.ndarray]:
        """Mean squared one-step TD error and its parameter gradient."""
        sa = np.hstack([batch.s, batch.a])
        delta = batch.r - self.critic(sa)[:, 0]
        up = (-2.0 * delta / len(batch))[:, None]
        return float(np.mean(delta ** 2)), self.critic.flat_gradient(sa, up)

    def actor_gradient(self, states: np.ndarray) -> Tuple[float, np.ndarray]:
        """Mean ``Q(s, pi(s))`` and its gradient with respect to the actor parameters."""
        a = self.actor(states)
        sa = np.hstack([states, a])
        q = self.critic(sa)[:, 0]
        _, dsa = self.critic.backward(sa, np.full((len(states), 1), 1.0 / len(states)))
        dq_da = dsa[:, self.state_dim:]
        return float(np.mean(q)), self.actor.flat_gradient(states, dq_da)

    def update_step(self, batch: TransitionBatch) -> Tuple[float, float]:
        """One critic step and one actor step; returns (critic loss, actor objective).

        Raises
        ------
        TrainingError
            If the critic loss or actor objective is non-finite.
        """
        if len(batch) == 0:
            raise ValidationError("empty batch")
        loss, g_c = self.critic_gradient(batch)
        if not (math.isfinite(loss) and np.all(np.isfinite(g_c))):
            raise TrainingError(f"non-finite critic loss {loss} (critic lr {self.cfg.critic_lr})")
        self.critic.set_params(self.critic_opt.step(self.critic.get_params(), g_c))
        obj, g_a = self.actor_gradient(batch.s)
        if not (math.isfinite(obj) and np.all(np.isfinite(g_a))):
            raise TrainingError(f"non-finite actor objective {obj} (actor lr {self.cfg.actor_lr})")
        # rewards are costs: descend dQ/da
        self.actor.set_params(self.actor_opt.step(self.actor.get_params(), g_a))
        return loss, obj

    def soft_update(self, eta: Optional[float] = None) -> None:
        eta = self.cfg.eta if eta is None else float(eta)
        for local, target in ((self.actor, self.actor_target), (self.critic, self.critic_target)):
            target.set_params(eta * local.get_params() + (1.0 - eta) * target.get_params())

    def nets(self) -> Tuple[Mlp, Mlp, Mlp, Mlp]:
        return self.actor, self.critic, self.actor_target, self.critic_target


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpisodeLog:
    """One row per window of episodes."""

    episode: List[int] = field(default_factory=list)
    mean_reward: List[float] = field(default_factory=list)
    min_reward: List[float] = field(default_factory=list)
    r_l: List[float] = field(default_factory=list)
    sigma: List[float] = field(default_factory=list)

    def append(self, episode, mean_r, min_r, r_l, sigma) -> None:
        self.episode.append(int(episode))
        self.mean_reward.append(float(mean_r))
        self.min_reward.append(float(min_r))
        self.r_l.append(float(r_l))
        self.sigma.append(float(sigma))

    def rows(self):
        return list(zip(self.episode, self.mean_reward, self.min_reward, self.r_l, self.sigma))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.rows():
            w.writerow([row[0]] + [format(v, ".17g") for v in row[1:]])
        return buf.getvalue()


@dataclass
class RlhResult:
    agent: DdpgAgent
    log: EpisodeLog
    rewards: np.ndarray
    best_action: np.ndarray
    best_reward: float
    best_state: np.ndarray


def train_rlh(problem: OcpDefinition, sampler: BcSampler, cfg: RlhConfig) -> RlhResult:
    """Run ``cfg.episodes`` one-step episodes of DDPG.

    Per episode: sample ``s``, act with decaying Gaussian exploration, score
    the rollout, store it, update on a mixed batch and soft-update the
    targets.  Every ``cfg.window`` episodes the window's mean reward is logged
    and, if it is below ``R_l``, the threshold decays by ``beta_l``.
    """
    rng = np.random.default_rng(cfg.seed)
    n = problem.state_dim
    if sampler.low.shape != (2 * n + 1,):
        raise ConfigurationError(f"sampler must produce {2 * n + 1} boundary values")
    low = np.asarray(cfg.action_low if cfg.action_low is not None else problem.action_box[0], float)
    high = np.asarray(cfg.action_high if cfg.action_high is not None else problem.action_box[1],
                      float)
    agent = DdpgAgent(2 * n + 1, low, high, sampler.low, sampler.high, cfg, rng)
    memory = ReplayMemory(cfg.memory, cfg.good_capacity, 2 * n + 1, n, cfg.r_l, cfg.beta_l,
                          cfg.phi)
    elog = EpisodeLog()
    rewards = np.empty(int(cfg.episodes))
    best = (math.inf, agent.actor(sampler.low), sampler.low)
    window: List[float] = []
    for ep in range(int(cfg.episodes)):
        sigma = sigma_schedule(ep, cfg.episodes, cfg.sigma_start, cfg.sigma_end)
        s = sampler.sample(rng)
        a = agent.act(s, sigma, rng)
        r, _ = reward(problem, BoundaryConditionSet.from_vector(s, n), a, cfg.reward, cfg.steps)
        rewards[ep] = r
        if r < best[0]:
            best = (r, a.copy(), s.copy())
        memory.remember(Transition(s, a, r))
        agent.update_step(memory.sample_batch(cfg.batch_size, rng))
        agent.soft_update()
        window.append(r)
        if len(window) == cfg.window or ep == cfg.episodes - 1:
            mean_r = float(np.mean(window))
            elog.append(ep + 1, mean_r, min(window), memory.r_l, sigma)
            if mean_r < memory.r_l:
                memory.decay_threshold()
            window = []
    return RlhResult(agent, elog, rewards, best[1], best[0], best[2])


def learning_signal(rewards: Sequence[float], fraction: float = 0.1) -> Tuple[float, float]:
    """Mean reward over the first and the last ``fraction`` of episodes."""
    r = np.asarray(rewards, dtype=float)
    k = max(1, int(round(fraction * r.size)))
    return float(np.mean(r[:k])), float(np.mean(r[-k:]))


# ---------------------------------------------------------------------------
# checkpoints


def save_agent(result: RlhResult, directory, problem_id: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in zip(NET_FILES, result.agent.nets()):
        save_net(net, directory / name)
    write_json(directory / HYPER_FILE, {
        "problem_id": problem_id,
        "hyperparameters": result.agent.cfg.to_dict(),
        "action_low": result.agent.action_low,
        "action_high": result.agent.action_high,
        "best_action": result.best_action,
        "best_reward": result.best_reward,
        "best_state": result.best_state,
    })
    atomic_write_text(directory / "episodes.csv", result.log.to_csv())


def load_agent(directory) -> Tuple[DdpgAgent, dict]:
    """Rebuild an agent from its four networks and hyperparameter file."""
    directory = Path(directory)
    try:
        with open(directory / HYPER_FILE, encoding="utf-8") as fh:
            meta = json.load(fh)
        cfg = RlhConfig.from_dict(meta["hyperparameters"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"{directory / HYPER_FILE}: malformed agent file ({exc})") from None
    nets = [load_net(directory / name) for name in NET_FILES]
    agent = DdpgAgent.__new__(DdpgAgent)
    agent.cfg = cfg
    agent.action_low = np.asarray(meta["action_low"], dtype=float)
    agent.action_high = np.asarray(meta["action_high"], dtype=float)
    agent.actor, agent.critic, agent.actor_target, agent.critic_target = nets
    agent.state_dim = agent.actor.input_dim
    agent.action_dim = agent.actor.output_dim
    agent.actor_opt = Adam(agent.actor.n_params, cfg.actor_lr)
    agent.critic_opt = Adam(agent.critic.n_params, cfg.critic_lr)
    return agent, meta

