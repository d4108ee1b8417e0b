"""Dense and LSTM layers, losses, optimizers and gradient checking.

Parameters live in plain ``{name: ndarray}`` dicts owned by a ``Module``.
Optimizers never write into an array: they return fresh arrays that the
module rebinds, so anything that captured the old arrays during a forward
pass (chain tapes, cached steps) keeps seeing the values it was computed
with.
"""

import logging
import math
from typing import Callable, Dict, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, PositiveFloat, confloat

from .errors import ShapeError
from .tensor import Activation, Matrix, RandomSource, activate
from .tensor import activation_grad

log = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]

BCE_EPSILON = 1e-7


def glorot_uniform(n_in: int, n_out: int, rng: RandomSource) -> Matrix:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return (rng.uniform((n_in, n_out)) * 2.0 - 1.0) * limit


def prefixed(prefix: str, values: Params) -> Params:
    return {f"{prefix}{name}": value for name, value in values.items()}


class Module:
    """A named bag of parameters with nested children."""

    def __init__(self):
        self.params: Params = {}
        self.children: Dict[str, "Module"] = {}

    def named_parameters(self, prefix: str = "") -> Params:
        rv = prefixed(prefix, self.params)
        for name, child in self.children.items():
            rv.update(child.named_parameters(f"{prefix}{name}."))
        return rv

    def load_parameters(self, values: Params, prefix: str = ""):
        for name, current in self.params.items():
            key = prefix + name
            if key not in values:
                continue
            value = np.asarray(values[key], dtype=np.float64)
            if value.shape != current.shape:
                raise ShapeError(
                    f"parameter {key}", current.shape, value.shape
                )
            self.params[name] = value
        for name, child in self.children.items():
            child.load_parameters(values, f"{prefix}{name}.")

    def zero_grads(self, prefix: str = "") -> Params:
        return {
            name: np.zeros_like(value)
            for name, value in self.named_parameters(prefix).items()
        }


class DenseLayer(Module):
    """``activation(x @ W + b)`` applied row-wise."""

    def __init__(
        self,
        n_in: int,
        n_out: int,
        activation: Activation = "identity",
        rng: Optional[RandomSource] = None,
    ):
        super().__init__()
        self.n_in = n_in
        self.n_out = n_out
        self.activation = activation
        if rng is None:
            weights = np.zeros((n_in, n_out))
        else:
            weights = glorot_uniform(n_in, n_out, rng)
        self.params = {"W": weights, "b": np.zeros(n_out)}

    def forward(self, x: Matrix) -> Tuple[Matrix, tuple]:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(
                "dense input", x.shape, (x.shape[0], self.n_in)
            )
        W, b = self.params["W"], self.params["b"]
        y = activate(x @ W + b, self.activation)
        return y, (x, y, W)

    def backward(self, cache: tuple, dy: Matrix) -> Tuple[Matrix, Params]:
        x, y, W = cache
        if dy.shape != y.shape:
            raise ShapeError("stale dense cache", y.shape, dy.shape)
        dpre = dy * activation_grad(self.activation, y)
        grads = {"W": x.T @ dpre, "b": dpre.sum(axis=0)}
        return dpre @ W.T, grads


class LstmCell(Module):
    """Single-layer LSTM without peepholes.

    Gate blocks in the stacked weights are ordered input, forget, output,
    candidate.
    """

    def __init__(
        self, n_in: int, n_hidden: int, rng: Optional[RandomSource] = None
    ):
        super().__init__()
        self.n_in = n_in
        self.n_hidden = n_hidden
        width = 4 * n_hidden
        if rng is None:
            wx = np.zeros((n_in, width))
            wh = np.zeros((n_hidden, width))
            bias = np.zeros(width)
        else:
            limit = 1.0 / math.sqrt(n_hidden)
            wx = (rng.uniform((n_in, width)) * 2.0 - 1.0) * limit
            wh = (rng.uniform((n_hidden, width)) * 2.0 - 1.0) * limit
            bias = np.zeros(width)
            bias[n_hidden : 2 * n_hidden] = 1.0
        self.params = {"Wx": wx, "Wh": wh, "b": bias}

    def zero_state(self, batch: int) -> Tuple[Matrix, Matrix]:
        shape = (batch, self.n_hidden)
        return np.zeros(shape), np.zeros(shape)

    def step(
        self, x: Matrix, state: Tuple[Matrix, Matrix]
    ) -> Tuple[Tuple[Matrix, Matrix], tuple]:
        h, c = state
        H = self.n_hidden
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError("lstm input", x.shape, (x.shape[0], self.n_in))
        if h.shape != (x.shape[0], H) or c.shape != h.shape:
            raise ShapeError("lstm state", h.shape, c.shape, (x.shape[0], H))
        p = self.params
        z = x @ p["Wx"] + h @ p["Wh"] + p["b"]
        i = activate(z[:, :H], "sigmoid")
        f = activate(z[:, H : 2 * H], "sigmoid")
        o = activate(z[:, 2 * H : 3 * H], "sigmoid")
        g = np.tanh(z[:, 3 * H :])
        c_next = f * c + i * g
        tc = np.tanh(c_next)
        h_next = o * tc
        cache = (x, h, c, i, f, o, g, tc, p["Wx"], p["Wh"])
        return (h_next, c_next), cache

    def backward(
        self, cache: tuple, dh: Matrix, dc: Optional[Matrix] = None
    ) -> Tuple[Matrix, Matrix, Matrix, Params]:
        x, h, c, i, f, o, g, tc, wx, wh = cache
        if dh.shape != h.shape:
            raise ShapeError("stale lstm cache", h.shape, dh.shape)
        dc_total = dh * o * (1.0 - tc * tc)
        if dc is not None:
            dc_total = dc_total + dc
        dz = np.concatenate(
            (
                dc_total * g * i * (1.0 - i),
                dc_total * c * f * (1.0 - f),
                dh * tc * o * (1.0 - o),
                dc_total * i * (1.0 - g * g),
            ),
            axis=1,
        )
        grads = {"Wx": x.T @ dz, "Wh": h.T @ dz, "b": dz.sum(axis=0)}
        return dz @ wx.T, dz @ wh.T, dc_total * f, grads


def _check_same_shape(what: str, pred: Matrix, target: Matrix):
    if pred.shape != target.shape:
        raise ShapeError(what, pred.shape, target.shape)


def bce_loss(pred: Matrix, target: Matrix) -> Tuple[float, Matrix]:
    """Mean binary cross-entropy and its gradient w.r.t. ``pred``."""
    _check_same_shape("bce", pred, target)
    p = np.clip(pred, BCE_EPSILON, 1.0 - BCE_EPSILON)
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    grad = (p - target) / (p * (1.0 - p) * p.size)
    return float(loss), grad


def mse_loss(pred: Matrix, target: Matrix) -> Tuple[float, Matrix]:
    _check_same_shape("mse", pred, target)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


LOSSES = {"bce": bce_loss, "mse": mse_loss}


def loss_for(visible_activation: Activation) -> str:
    return "bce" if visible_activation == "sigmoid" else "mse"


class OptimizerConfig(BaseModel):
    kind: Literal["sgd_momentum", "adam"] = "adam"
    learning_rate: PositiveFloat = 0.001
    momentum: confloat(ge=0.0, lt=1.0) = 0.5
    anneal_rate: confloat(gt=0.0, le=1.0) = 1.0
    beta1: confloat(ge=0.0, lt=1.0) = 0.9
    beta2: confloat(ge=0.0, lt=1.0) = 0.999
    epsilon: PositiveFloat = 1e-8

    class Config:
        extra = "forbid"


class GradClipConfig(BaseModel):
    max_l2_norm: PositiveFloat = 0.25

    class Config:
        extra = "forbid"


class OptimizerState:
    """Per-parameter accumulators plus the schedule position."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.step = 0
        self.epochs = 0
        self.slots: Dict[str, Params] = {}

    @property
    def learning_rate(self) -> float:
        if self.config.kind == "sgd_momentum":
            return self.config.learning_rate * (
                self.config.anneal_rate**self.epochs
            )
        return self.config.learning_rate

    def slot(self, kind: str, name: str, like: np.ndarray) -> np.ndarray:
        rv = self.slots.setdefault(kind, {}).get(name)
        if rv is None:
            return np.zeros_like(like)
        if rv.shape != like.shape:
            raise ShapeError(
                f"{kind} accumulator {name}", rv.shape, like.shape
            )
        return rv

    def update(self, params: Params, grads: Params) -> Params:
        self.step += 1
        if self.config.kind == "sgd_momentum":
            return sgd_momentum_update(params, grads, self)
        return adam_update(params, grads, self, self.step)

    def end_epoch(self):
        self.epochs += 1

    def tensors(self, prefix: str) -> Params:
        rv = {
            f"{prefix}step": np.array(float(self.step)),
            f"{prefix}epochs": np.array(float(self.epochs)),
        }
        for kind, values in sorted(self.slots.items()):
            for name, value in sorted(values.items()):
                rv[f"{prefix}{kind}.{name}"] = value
        return rv

    def restore(self, tensors: Params, prefix: str):
        self.step = int(tensors[f"{prefix}step"])
        self.epochs = int(tensors[f"{prefix}epochs"])
        self.slots = {}
        for key, value in tensors.items():
            if not key.startswith(prefix):
                continue
            rest = key[len(prefix) :]
            if "." not in rest:
                continue
            kind, name = rest.split(".", 1)
            self.slots.setdefault(kind, {})[name] = value


def _paired(params: Params, grads: Params):
    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.shape:
            raise ShapeError(f"gradient of {name}", param.shape, grad.shape)
        yield name, param, grad


def sgd_momentum_update(
    params: Params, grads: Params, opt: OptimizerState
) -> Params:
    rv = dict(params)
    lr = opt.learning_rate
    velocities = opt.slots.setdefault("velocity", {})
    for name, param, grad in _paired(params, grads):
        velocity = opt.config.momentum * opt.slot("velocity", name, param)
        velocity = velocity - lr * grad
        velocities[name] = velocity
        rv[name] = param + velocity
    return rv


def adam_update(
    params: Params, grads: Params, opt: OptimizerState, step: int
) -> Params:
    if step < 1:
        raise ValueError(f"adam step must be >= 1, got {step}")
    cfg = opt.config
    rv = dict(params)
    first = opt.slots.setdefault("m", {})
    second = opt.slots.setdefault("v", {})
    for name, param, grad in _paired(params, grads):
        m = cfg.beta1 * opt.slot("m", name, param) + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * opt.slot("v", name, param) + (1.0 - cfg.beta2) * (
            grad * grad
        )
        first[name] = m
        second[name] = v
        m_hat = m / (1.0 - cfg.beta1**step)
        v_hat = v / (1.0 - cfg.beta2**step)
        rv[name] = param - cfg.learning_rate * m_hat / (
            np.sqrt(v_hat) + cfg.epsilon
        )
    return rv


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(
    grads: Params, cfg: Optional[GradClipConfig]
) -> Params:
    if cfg is None:
        return grads
    norm = global_norm(grads)
    if norm <= cfg.max_l2_norm:
        return grads
    scale = cfg.max_l2_norm / norm
    return {name: g * scale for name, g in grads.items()}


Closure = Callable[[Params], Tuple[float, Params]]


def gradcheck(
    closure: Closure,
    params: Params,
    h: float = 1e-5,
    names=None,
    max_checks: Optional[int] = None,
) -> float:
    """Largest relative error between analytic and central differences.

    ``closure`` maps a full parameter dict to ``(loss, grads)`` and must be
    deterministic. Only ``names`` (default: every parameter with a
    gradient) are perturbed; ``max_checks`` caps the number of elements
    checked per parameter using an even stride.
    """
    params = {
        name: np.array(v, dtype=np.float64) for name, v in params.items()
    }
    _, analytic = closure(params)
    names = sorted(analytic) if names is None else names
    worst = 0.0
    for name in names:
        flat = params[name].reshape(-1)
        indices = range(flat.size)
        if max_checks is not None and flat.size > max_checks:
            indices = range(0, flat.size, math.ceil(flat.size / max_checks))
        expected = analytic[name].reshape(-1)
        for index in indices:
            original = flat[index]
            flat[index] = original + h
            plus, _ = closure(params)
            flat[index] = original - h
            minus, _ = closure(params)
            flat[index] = original
            numeric = (plus - minus) / (2.0 * h)
            error = abs(numeric - expected[index]) / max(
                abs(numeric) + abs(expected[index]), 1e-6
            )
            if error > worst:
                worst = error
                log.debug(
                    "gradcheck %s[%d]: analytic %g numeric %g",
                    name,
                    index,
                    expected[index],
                    numeric,
                )
    return worst
