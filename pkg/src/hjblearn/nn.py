"""Dense feed-forward networks with hand-written backpropagation.

An :class:`Mlp` is a chain of affine layers, each followed by an activation.
Two fixed affine maps wrap the trainable core: inputs are mapped from their
data range onto ``[-1, 1]`` and outputs are rescaled by ``out_offset +
out_scale * core``.  Neither map is trained; both are part of a checkpoint.

Parameters are exposed as one flat vector (per layer: weight row-major, then
bias) so optimizers never need to know the layer structure.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import TrainingError, UsageError, ValidationError
from .serialization import read_json, write_json

log = logging.getLogger(__name__)

ACTIVATIONS = ("sigmoid", "tanh", "tansig", "linear", "scaled_tanh")
CHECKPOINT_FORMAT = "hjblearn.mlp"
CHECKPOINT_VERSION = 1


def tansig(z):
    """MATLAB's tansig, ``2 / (1 + exp(-2z)) - 1`` (numerically equal to tanh)."""
    return 2.0 * expit(2.0 * z) - 1.0


def _activate(tag: str, act_range, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Activation value and its derivative with respect to ``z``."""
    if tag == "linear":
        return z, np.ones_like(z)
    if tag == "sigmoid":
        a = expit(z)
        return a, a * (1.0 - a)
    if tag == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    if tag == "tansig":
        a = tansig(z)
        return a, 1.0 - a * a
    if tag == "scaled_tanh":
        low, high = act_range
        half = 0.5 * (high - low)
        t = np.tanh(z)
        return 0.5 * (high + low) + half * t, half * (1.0 - t * t)
    raise ValidationError(f"unknown activation {tag!r}")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str
    act_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.activation not in ACTIVATIONS:
            raise ValidationError(
                f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValidationError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} do not match")
        if self.activation == "scaled_tanh":
            if self.act_range is None:
                raise ValidationError("scaled_tanh needs a (low, high) range")
            low, high = (float(v) for v in self.act_range)
            if not (math.isfinite(low) and math.isfinite(high) and high > low):
                raise ValidationError(f"scaled_tanh range must be finite with high > low, "
                                      f"got {self.act_range}")
            self.act_range = (low, high)
        elif self.act_range is not None:
            raise ValidationError(f"activation {self.activation} takes no range")

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class Mlp:
    layers: List[Layer]
    in_low: Optional[np.ndarray] = None
    in_high: Optional[np.ndarray] = None
    out_offset: Optional[np.ndarray] = None
    out_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("an Mlp needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[0] != nxt.weight.shape[1]:
                raise ValidationError(
                    f"layer sizes do not chain: {prev.weight.shape[0]} -> {nxt.weight.shape[1]}")
        n_in, n_out = self.input_dim, self.output_dim
        self.in_low = np.full(n_in, -1.0) if self.in_low is None else np.asarray(self.in_low, float)
        self.in_high = np.full(n_in, 1.0) if self.in_high is None else np.asarray(self.in_high, float)
        self.out_offset = (np.zeros(n_out) if self.out_offset is None
                           else np.asarray(self.out_offset, float))
        self.out_scale = (np.ones(n_out) if self.out_scale is None
                          else np.asarray(self.out_scale, float))
        if self.in_low.shape != (n_in,) or self.in_high.shape != (n_in,):
            raise ValidationError("input normalization does not match input_dim")
        if self.out_offset.shape != (n_out,) or self.out_scale.shape != (n_out,):
            raise ValidationError("output normalization does not match output_dim")
        if np.any(self.in_high < self.in_low):
            raise ValidationError("input normalization needs high >= low")

    # ------------------------------------------------------------------
    # construction and parameter access

    @classmethod
    def create(cls, sizes: Sequence[int], activations: Sequence[str],
               rng: np.random.Generator, act_ranges: Optional[Sequence] = None) -> "Mlp":
        """Random network with ``sizes = [n_in, h1, ..., n_out]``.

        Weights are uniform in ``+-sqrt(6 / (fan_in + fan_out))``; biases start at zero.
        """
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise UsageError("need one activation per layer (len(sizes) - 1)")
        if any(int(s) < 1 for s in sizes):
            raise UsageError(f"layer sizes must be positive, got {list(sizes)}")
        act_ranges = list(act_ranges) if act_ranges is not None else [None] * len(activations)
        layers = []
        for n_in, n_out, tag, rg in zip(sizes[:-1], sizes[1:], activations, act_ranges):
            limit = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(int(n_out), int(n_in)))
            layers.append(Layer(w, np.zeros(int(n_out)), tag, rg))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def get_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise UsageError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for layer in self.layers:
            nw = layer.weight.size
            layer.weight = flat[pos:pos + nw].reshape(layer.weight.shape).copy()
            pos += nw
            layer.bias = flat[pos:pos + layer.bias.size].copy()
            pos += layer.bias.size

    def copy(self) -> "Mlp":
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation, l.act_range)
                  for l in self.layers]
        return Mlp(layers, self.in_low.copy(), self.in_high.copy(),
                   self.out_offset.copy(), self.out_scale.copy())

    def set_input_range(self, low, high) -> None:
        low = np.asarray(low, dtype=float)
        high = np.asarray(high, dtype=float)
        if low.shape != (self.input_dim,) or high.shape != (self.input_dim,) \
                or np.any(high < low):
            raise UsageError("input range must match input_dim with high >= low")
        self.in_low, self.in_high = low.copy(), high.copy()

    def set_output_affine(self, offset, scale) -> None:
        offset = np.asarray(offset, dtype=float)
        scale = np.asarray(scale, dtype=float)
        if offset.shape != (self.output_dim,) or scale.shape != (self.output_dim,):
            raise UsageError("output affine must match output_dim")
        self.out_offset, self.out_scale = offset.copy(), scale.copy()

    # ------------------------------------------------------------------
    # evaluation

    def _input_gain(self) -> np.ndarray:
        # degenerate ranges (fixed inputs) map to 0 instead of dividing by zero
        width = self.in_high - self.in_low
        return np.where(width > 0, 2.0 / np.where(width > 0, width, 1.0), 0.0)

    def normalize_input(self, x: np.ndarray) -> np.ndarray:
        gain = self._input_gain()
        mid = 0.5 * (self.in_high + self.in_low)
        return (x - mid) * gain

    def _check_input(self, x) -> Tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.input_dim:
            raise UsageError(f"input must have trailing dimension {self.input_dim}, got {x.shape}")
        return x2, single

    def _forward_cache(self, x2: np.ndarray):
        a = self.normalize_input(x2)
        acts = [a]
        derivs = []
        for layer in self.layers:
            z = a @ layer.weight.T + layer.bias
            a, d = _activate(layer.activation, layer.act_range, z)
            acts.append(a)
            derivs.append(d)
        y = self.out_offset + self.out_scale * a
        return y, acts, derivs

    def forward(self, x) -> np.ndarray:
        """Network output for one input vector or a batch of rows."""
        x2, single = self._check_input(x)
        y, _, _ = self._forward_cache(x2)
        return y[0] if single else y

    __call__ = forward

    def _deltas(self, derivs, upstream2: np.ndarray) -> List[np.ndarray]:
        """Per-sample gradients with respect to each layer's pre-activation."""
        g = upstream2 * self.out_scale
        deltas = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            g = g * derivs[i]
            deltas[i] = g
            g = g @ self.layers[i].weight
        return deltas

    def backward(self, x, upstream) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Reverse-mode gradients of ``sum(upstream * forward(x))``.

        Returns per-layer ``(dW, db)`` summed over the batch and the gradient
        with respect to the (unnormalized) input, one row per sample.
        """
        x2, single = self._check_input(x)
        up = np.asarray(upstream, dtype=float)
        up2 = up[None, :] if up.ndim == 1 else up
        if up2.shape != (x2.shape[0], self.output_dim):
            raise UsageError(f"upstream gradient must have shape {(x2.shape[0], self.output_dim)}")
        _, acts, derivs = self._forward_cache(x2)
        deltas = self._deltas(derivs, up2)
        grads = [(d.T @ a, d.sum(axis=0)) for d, a in zip(deltas, acts[:-1])]
        dx = (deltas[0] @ self.layers[0].weight) * self._input_gain()
        return grads, (dx[0] if single else dx)

    def flat_gradient(self, x, upstream) -> np.ndarray:
        grads, _ = self.backward(x, upstream)
        return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])

    def param_jacobian(self, x) -> np.ndarray:
        """Per-sample output Jacobian with respect to the flat parameters, ``(B, out, P)``."""
        x2, _ = self._check_input(x)
        _, acts, derivs = self._forward_cache(x2)
        batch = x2.shape[0]
        jac = np.empty((batch, self.output_dim, self.n_params))
        for k in range(self.output_dim):
            up = np.zeros((batch, self.output_dim))
            up[:, k] = 1.0
            deltas = self._deltas(derivs, up)
            cols = []
            for d, a in zip(deltas, acts[:-1]):
                cols.append((d[:, :, None] * a[:, None, :]).reshape(batch, -1))
                cols.append(d)
            jac[:, k, :] = np.concatenate(cols, axis=1)
        return jac


# ---------------------------------------------------------------------------
# Optimizers on flat parameter vectors


class Adam:
    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise UsageError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class Sgd:
    def __init__(self, n_params: int, lr: float = 1e-2):
        if not lr > 0:
            raise UsageError("learning rate must be positive")
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * grad


# ---------------------------------------------------------------------------
# Regression training


@dataclass
class TrainConfig:
    """Regression settings.

    ``optimizer`` is ``adam``, ``sgd`` or ``lm`` (Levenberg-Marquardt, full
    batch; one accepted step per epoch).  ``batch_size = 0`` means full batch.
    ``patience = 0`` disables early stopping; ``target_mse`` stops as soon as
    the monitored MSE reaches it.
    """

    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1000
    batch_size: int = 0
    patience: int = 0
    seed: int = 0
    mu: float = 1e-3
    mu_max: float = 1e10
    target_mse: float = 0.0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd", "lm"):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise UsageError("lr must be positive")
        if int(self.epochs) < 0:
            raise UsageError("epochs must be >= 0")
        if int(self.batch_size) < 0 or int(self.patience) < 0:
            raise UsageError("batch_size and patience must be >= 0")
        if not self.mu > 0:
            raise UsageError("mu must be positive")


@dataclass
class TrainLog:
    epochs: List[int] = field(default_factory=list)
    train_mse: List[float] = field(default_factory=list)
    test_mse: List[float] = field(default_factory=list)
    best_epoch: int = 0

    def append(self, epoch: int, train: float, test: float) -> None:
        self.epochs.append(int(epoch))
        self.train_mse.append(float(train))
        self.test_mse.append(float(test))

    def rows(self):
        return list(zip(self.epochs, self.train_mse, self.test_mse))

    @property
    def best_test_mse(self) -> float:
        return self.test_mse[self.epochs.index(self.best_epoch)]


def mse(net: Mlp, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.mean((net.forward(x) - y) ** 2))


def _as_xy(data, net: Mlp) -> Tuple[np.ndarray, np.ndarray]:
    x, y = data
    x = np.asarray(x, dtype=float).reshape(-1, net.input_dim)
    y = np.asarray(y, dtype=float).reshape(-1, net.output_dim)
    if len(x) != len(y):
        raise UsageError(f"{len(x)} inputs but {len(y)} targets")
    return x, y


def _lm_epoch(net: Mlp, x: np.ndarray, y: np.ndarray, state: dict, cfg: TrainConfig) -> bool:
    """One accepted Levenberg-Marquardt step; False when damping runs away."""
    params = net.get_params()
    resid = (net.forward(x) - y).ravel()
    sse = float(resid @ resid)
    jac = net.param_jacobian(x).reshape(-1, net.n_params)
    jtj = jac.T @ jac
    jtr = jac.T @ resid
    eye = np.eye(net.n_params)
    while state["mu"] <= cfg.mu_max:
        try:
            delta = np.linalg.solve(jtj + state["mu"] * eye, -jtr)
        except np.linalg.LinAlgError:
            state["mu"] *= 10.0
            continue
        net.set_params(params + delta)
        r_new = (net.forward(x) - y).ravel()
        sse_new = float(r_new @ r_new)
        if np.isfinite(sse_new) and sse_new < sse:
            state["mu"] = max(state["mu"] / 10.0, 1e-20)
            return True
        state["mu"] *= 10.0
    net.set_params(params)
    return False


def train_regression(net: Mlp, train, test, cfg: TrainConfig) -> TrainLog:
    """Minimise the mean squared error of ``net`` on ``train``.

    Epoch 0 records the untrained net.  Model selection uses the test MSE
    (train MSE when the test set is empty); on return ``net`` holds the best
    parameters seen.

    Raises
    ------
    TrainingError
        If the training loss becomes non-finite.
    """
    x_tr, y_tr = _as_xy(train, net)
    x_te, y_te = _as_xy(test, net) if test is not None else (x_tr[:0], y_tr[:0])
    if len(x_tr) == 0:
        raise UsageError("training set is empty")
    rng = np.random.default_rng(cfg.seed)

    def monitored(tr, te):
        return te if len(x_te) else tr

    log_ = TrainLog()
    tr0, te0 = mse(net, x_tr, y_tr), mse(net, x_te, y_te)
    log_.append(0, tr0, te0)
    best = (monitored(tr0, te0), net.get_params(), 0)
    if cfg.optimizer == "adam":
        opt = Adam(net.n_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    elif cfg.optimizer == "sgd":
        opt = Sgd(net.n_params, cfg.lr)
    lm_state = {"mu": cfg.mu}
    n = len(x_tr)
    batch = n if cfg.batch_size in (0, None) else min(int(cfg.batch_size), n)
    stale = 0
    for epoch in range(1, int(cfg.epochs) + 1):
        if best[0] <= cfg.target_mse:
            break
        if cfg.optimizer == "lm":
            if not _lm_epoch(net, x_tr, y_tr, lm_state, cfg):
                log.info("LM damping exceeded mu_max at epoch %d", epoch)
                break
        else:
            order = rng.permutation(n) if batch < n else np.arange(n)
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                err = net.forward(x_tr[idx]) - y_tr[idx]
                # d(mean sq err)/d(out) over samples and outputs
                up = 2.0 * err / err.size
                grad = net.flat_gradient(x_tr[idx], up)
                net.set_params(opt.step(net.get_params(), grad))
        tr, te = mse(net, x_tr, y_tr), mse(net, x_te, y_te)
        if not np.isfinite(tr):
            raise TrainingError(f"non-finite training loss at epoch {epoch} "
                                f"(optimizer {cfg.optimizer}, lr {cfg.lr})")
        log_.append(epoch, tr, te)
        score = monitored(tr, te)
        if score < best[0]:
            best = (score, net.get_params(), epoch)
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    net.set_params(best[1])
    log_.best_epoch = best[2]
    return log_


# ---------------------------------------------------------------------------
# Checkpoints


def net_to_dict(net: Mlp) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_dim": net.input_dim,
        "output_dim": net.output_dim,
        "layers": [
            {
                "in": layer.weight.shape[1],
                "out": layer.weight.shape[0],
                "activation": layer.activation,
                "range": list(layer.act_range) if layer.act_range is not None else None,
                "weight": layer.weight.ravel(),
                "bias": layer.bias,
            }
            for layer in net.layers
        ],
        "input_norm": {"low": net.in_low, "high": net.in_high},
        "output_norm": {"offset": net.out_offset, "scale": net.out_scale},
    }


def net_from_dict(d: dict) -> Mlp:
    try:
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"not an {CHECKPOINT_FORMAT} checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {d.get('version')!r}")
        layers = []
        for i, ld in enumerate(d["layers"]):
            n_in, n_out = int(ld["in"]), int(ld["out"])
            w = np.asarray(ld["weight"], dtype=float)
            if w.size != n_in * n_out:
                raise ValidationError(f"layer {i}: weight has {w.size} values, "
                                      f"expected {n_in * n_out}")
            rg = ld.get("range")
            layers.append(Layer(w.reshape(n_out, n_in), ld["bias"], ld["activation"],
                                tuple(rg) if rg is not None else None))
        net = Mlp(layers, d["input_norm"]["low"], d["input_norm"]["high"],
                  d["output_norm"]["offset"], d["output_norm"]["scale"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed checkpoint: {exc}") from exc
    if net.input_dim != d["input_dim"] or net.output_dim != d["output_dim"]:
        raise ValidationError("declared input/output dims disagree with the layers")
    if not np.all(np.isfinite(net.get_params())):
        raise ValidationError("checkpoint contains non-finite parameters")
    return net


def save_net(net: Mlp, path) -> None:
    write_json(path, net_to_dict(net))


def load_net(path) -> Mlp:
    try:
        d = read_json(path)
    except ValueError as exc:
        raise ValidationError(f"{path}: cannot parse checkpoint: {exc}") from exc
    if not isinstance(d, dict):
        raise ValidationError(f"{path}: checkpoint must be a JSON object")
    return net_from_dict(d)
