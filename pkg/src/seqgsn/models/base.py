import logging
from functools import lru_cache
from importlib import import_module
from importlib.metadata import EntryPoint, entry_points
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..errors import ConfigError
from ..nn import GradClipConfig, Module, OptimizerConfig, OptimizerState
from ..nn import Params, clip_global_norm, gradcheck
from ..tensor import Matrix

log = logging.getLogger(__name__)

BUILTIN_KINDS = {
    "dae": "seqgsn.models.dae:dae",
    "gsn": "seqgsn.models.dae:gsn",
    "tgsn": "seqgsn.models.tgsn:kind",
    "untied_gsn": "seqgsn.models.untied:kind",
    "rnn_gsn": "seqgsn.models.rnngsn:kind",
    "sen": "seqgsn.models.sen:kind",
    "lstm": "seqgsn.models.lstm:kind",
}
GROUP = "seqgsn.models"


def _entry_points() -> List[EntryPoint]:
    eps = entry_points()
    if hasattr(eps, "select"):
        found = list(eps.select(group=GROUP))
    else:
        found = list(eps.get(GROUP, []))
    names = {ep.name for ep in found}
    for name, value in BUILTIN_KINDS.items():
        if name not in names:
            found.append(EntryPoint(name, value, GROUP))
    return found


@lru_cache()
def get_model_kinds() -> Dict[str, "ModelKind"]:
    rv = {}
    for ep in _entry_points():
        kind: ModelKind = ep.load()
        if ep.name != kind.name:
            log.warning(
                "model entry point %s loads kind %r, skipped",
                ep.name,
                kind.name,
            )
            continue
        if ep.name not in rv or kind.priority > rv[ep.name].priority:
            kind.module = import_module(ep.module)
            rv[ep.name] = kind
    return rv


def get_model_kind(name: str) -> "ModelKind":
    try:
        return get_model_kinds()[name]
    except KeyError:
        raise ConfigError(f"unknown model kind {name!r}") from None


class ModelKind:
    """A named set of operations implementing one sequence learner.

    Plugin modules create one instance and register their functions on it
    with ``@kind.operation``; the function name is the operation name.
    """

    def __init__(
        self, name: str, priority: int = 100, gradcheck_tolerance=1e-4
    ):
        self.name = name
        self.priority = priority
        self.gradcheck_tolerance = gradcheck_tolerance
        self.description = None
        self.ops: Dict[str, Callable] = {}
        self._module = None

    def operation(self, fn: Optional[Callable] = None, *, name=None):
        def register(fn):
            self.ops[name or fn.__name__] = fn
            return fn

        if fn is None:
            return register
        return register(fn)

    def supports(self, op: str) -> bool:
        return op in self.ops

    def run(self, op: str, *args, **kwargs):
        try:
            fn = self.ops[op]
        except KeyError:
            raise ConfigError(
                f"model kind {self.name!r} does not support {op!r}"
            ) from None
        return fn(*args, **kwargs)

    @property
    def module(self):
        return self._module

    @module.setter
    def module(self, module):
        self._module = module
        self.description = module.__doc__


class TrainerState:
    """Optimizer states of one run plus free-form extra tensors."""

    def __init__(
        self,
        optimizers: Optional[Dict[str, OptimizerState]] = None,
        extras: Optional[Params] = None,
    ):
        self.optimizers = optimizers or {}
        self.extras = extras or {}

    @classmethod
    def with_optimizers(cls, config: OptimizerConfig, *names: str):
        return cls({name: OptimizerState(config) for name in names})

    def __getitem__(self, name: str) -> OptimizerState:
        return self.optimizers[name]

    def end_epoch(self):
        for opt in self.optimizers.values():
            opt.end_epoch()

    def tensors(self) -> Params:
        rv = {}
        for name, opt in sorted(self.optimizers.items()):
            rv.update(opt.tensors(f"opt.{name}."))
        for name, value in sorted(self.extras.items()):
            rv[f"extra.{name}"] = np.asarray(value, dtype=np.float64)
        return rv

    def restore(self, tensors: Params):
        for name, opt in self.optimizers.items():
            opt.restore(tensors, f"opt.{name}.")
        self.extras = {
            key[len("extra.") :]: value
            for key, value in tensors.items()
            if key.startswith("extra.")
        }


class Predictor:
    """Online next-frame predictor with its own recurrent state.

    ``step`` receives the ground-truth frame at time t and returns the
    prediction for t+1, so a prediction never sees a frame after t.
    """

    def reset(self, batch: int):
        pass

    def step(self, x: Matrix) -> Matrix:
        raise NotImplementedError

    def predict_sequence(self, sequence: np.ndarray) -> np.ndarray:
        """Teacher-forced predictions for frames 1..T-1 of ``(T, B, D)``."""
        self.reset(sequence.shape[1])
        return np.stack(
            [self.step(sequence[t]) for t in range(sequence.shape[0] - 1)]
        )

    def rollout(self, prime: np.ndarray, steps: int) -> List[Matrix]:
        """Feed ``prime`` frames, then keep feeding back own predictions."""
        self.reset(prime.shape[1])
        prediction = None
        for frame in prime:
            prediction = self.step(frame)
        rv = []
        for _ in range(steps):
            rv.append(prediction)
            prediction = self.step(prediction)
        return rv


def minibatches(frames: np.ndarray, size: int, rng) -> List[Matrix]:
    """Shuffled row minibatches of a ``(N, D)`` frame matrix."""
    order = rng.permutation(frames.shape[0])
    return [
        frames[order[i : i + size]] for i in range(0, len(order), size)
    ]


def epoch_means(series: Dict[str, List[float]]) -> Dict[str, float]:
    return {
        name: float(np.mean(values))
        for name, values in series.items()
        if values
    }


def apply_update(
    model: Module,
    opt: OptimizerState,
    grads: Params,
    clip: Optional[GradClipConfig] = None,
):
    """Clip ``grads`` (named as in ``model.named_parameters()``) and step."""
    grads = clip_global_norm(grads, clip)
    model.load_parameters(opt.update(model.named_parameters(), grads))


def check_module(
    model: Module,
    loss_and_grads: Callable[[], Tuple[float, Params]],
    max_checks: Optional[int] = 12,
) -> float:
    """Gradient check of every parameter of ``model``.

    ``loss_and_grads`` must rebuild its own random streams from a fixed
    seed on every call so the noise stays frozen.
    """
    original = model.named_parameters()

    def closure(values):
        model.load_parameters(values)
        return loss_and_grads()

    try:
        return gradcheck(closure, original, max_checks=max_checks)
    finally:
        model.load_parameters(original)
