"""Temporal GSN: a GSN plus a linear map between windows of hidden states.

Training alternates two passes over the data. The GSN pass updates only
the GSN on its reconstruction of x_t and, once the warm-up gate is open,
on the decoded prediction of x_t+1. The transition pass then updates only
the transition, backpropagating the prediction loss through the frozen
decoder.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import SequenceError, ShapeError
from ..experiment import TrainConfig
from ..gsn import GsnParams, WalkbackConfig, decode_chain, gsn_reconstruct
from ..gsn import visible_loss, walkback_chain
from ..nn import GradClipConfig, Module, OptimizerState, Params
from ..nn import glorot_uniform, prefixed
from ..tensor import Matrix, NoiseConfig, RandomSource
from .base import ModelKind, Predictor, TrainerState, apply_update
from .base import check_module, epoch_means
from .dae import gsn_for

log = logging.getLogger(__name__)

kind = ModelKind("tgsn")

HiddenStack = List[Matrix]


class LinearTransition(Module):
    """Affine map from the last ``window`` hidden stacks to the next one.

    Stacks are flattened layer 1 first; the history is concatenated oldest
    first.
    """

    def __init__(
        self,
        window: int,
        widths: Sequence[int],
        rng: Optional[RandomSource] = None,
    ):
        super().__init__()
        self.window = window
        self.widths = list(widths)
        total = sum(self.widths)
        if rng is None:
            weights = np.zeros((window * total, total))
        else:
            weights = glorot_uniform(window * total, total, rng)
        self.params = {"W": weights, "b": np.zeros(total)}

    @property
    def total(self) -> int:
        return sum(self.widths)

    def flatten(self, stack: HiddenStack) -> Matrix:
        return np.concatenate(stack, axis=1)

    def split(self, flat: Matrix) -> HiddenStack:
        return np.split(flat, np.cumsum(self.widths)[:-1], axis=1)

    def forward(self, history: Sequence[HiddenStack]):
        if len(history) != self.window:
            raise ShapeError(
                "transition history", (len(history),), (self.window,)
            )
        x = np.concatenate([self.flatten(s) for s in history], axis=1)
        y = x @ self.params["W"] + self.params["b"]
        return self.split(y), x

    def backward(self, x: Matrix, d_stack: HiddenStack) -> Params:
        dy = self.flatten(d_stack)
        return {"W": x.T @ dy, "b": dy.sum(axis=0)}


def pad_history(
    history: Sequence[HiddenStack], window: int, widths: Sequence[int]
) -> List[HiddenStack]:
    """Last ``window`` stacks, left-padded with zero stacks."""
    recent = list(history[-window:])
    batch = recent[-1][0].shape[0]
    zeros = [np.zeros((batch, w)) for w in widths]
    return [zeros] * (window - len(recent)) + recent


def transition_predict(
    transition: LinearTransition, history: Sequence[HiddenStack]
) -> HiddenStack:
    return transition.forward(history)[0]


class TemporalGsn(Module):
    def __init__(self, gsn: GsnParams, transition: LinearTransition):
        super().__init__()
        if transition.widths != gsn.hidden_sizes:
            raise ShapeError(
                "transition widths", transition.widths, gsn.hidden_sizes
            )
        self.children = {"gsn": gsn, "transition": transition}

    @property
    def gsn(self) -> GsnParams:
        return self.children["gsn"]

    @property
    def transition(self) -> LinearTransition:
        return self.children["transition"]

    def padded(self, history: Sequence[HiddenStack]) -> List[HiddenStack]:
        return pad_history(
            history, self.transition.window, self.gsn.hidden_sizes
        )


def prediction_path(
    model: TemporalGsn,
    history: List[HiddenStack],
    target: Matrix,
    k: int,
    rng: RandomSource,
) -> Tuple[float, Params]:
    """Prediction loss with gradients for both the decoder and transition."""
    predicted, x = model.transition.forward(model.padded(history))
    tape = decode_chain(model.gsn, predicted, k, rng)
    loss, node_grads = visible_loss(tape, target)
    grads, leaves = tape.backward(node_grads)
    d_stack = [
        leaves.get(node, np.zeros_like(tape.value(node)))
        for node in tape.inputs[1:]
    ]
    rv = prefixed("gsn.", grads)
    rv.update(prefixed("transition.", model.transition.backward(x, d_stack)))
    return loss, rv


def _check_sequences(data: Sequence[np.ndarray]):
    for seq in data:
        if len(seq) < 2:
            raise SequenceError(
                f"temporal training needs at least 2 inputs, got {len(seq)}"
            )


def tgsn_gsn_pass(
    model: TemporalGsn,
    data: Sequence[np.ndarray],
    wb: WalkbackConfig,
    opt: OptimizerState,
    rng: RandomSource,
    use_prediction: bool = True,
    clip: Optional[GradClipConfig] = None,
) -> Dict[str, List[float]]:
    """GSN phase; the transition parameters are only read."""
    _check_sequences(data)
    gsn = model.gsn
    recon, predict = [], []
    for seq in data:
        history = []
        for t in range(len(seq)):
            tape = walkback_chain(gsn, seq[t], wb.k, rng)
            loss, node_grads = visible_loss(tape, seq[t])
            grads, _ = tape.backward(node_grads)
            recon.append(loss)
            history = (history + [tape.hiddens()])[-model.transition.window :]
            if use_prediction and t + 1 < len(seq):
                predicted = transition_predict(
                    model.transition, model.padded(history)
                )
                ptape = decode_chain(gsn, predicted, wb.k, rng)
                ploss, pnode_grads = visible_loss(ptape, seq[t + 1])
                pgrads, _ = ptape.backward(pnode_grads)
                grads = {name: g + pgrads[name] for name, g in grads.items()}
                predict.append(ploss)
            apply_update(model, opt, prefixed("gsn.", grads), clip)
    return {"recon": recon, "predict": predict}


def tgsn_transition_pass(
    model: TemporalGsn,
    data: Sequence[np.ndarray],
    wb: WalkbackConfig,
    opt: OptimizerState,
    rng: RandomSource,
    clip: Optional[GradClipConfig] = None,
) -> List[float]:
    """Transition phase; the GSN parameters are only read."""
    _check_sequences(data)
    gsn, transition = model.gsn, model.transition
    losses = []
    for seq in data:
        history = []
        for t in range(len(seq) - 1):
            _, ending = gsn_reconstruct(gsn, seq[t], wb, rng)
            history = (history + [ending.hiddens])[-transition.window :]
            loss, grads = prediction_path(
                model, history, seq[t + 1], wb.k, rng
            )
            grads = {
                name: g
                for name, g in grads.items()
                if name.startswith("transition.")
            }
            apply_update(model, opt, grads, clip)
            losses.append(loss)
    return losses


def tgsn_em_epoch(
    model: TemporalGsn,
    data: Sequence[np.ndarray],
    wb: WalkbackConfig,
    opts: TrainerState,
    rng: RandomSource,
    use_prediction: bool = True,
    clip: Optional[GradClipConfig] = None,
) -> Dict[str, float]:
    loss = model.gsn.loss
    first = tgsn_gsn_pass(
        model, data, wb, opts["gsn"], rng, use_prediction, clip
    )
    second = tgsn_transition_pass(
        model, data, wb, opts["transition"], rng, clip
    )
    return epoch_means(
        {
            f"recon_{loss}": first["recon"],
            f"gsn_predict_{loss}": first["predict"],
            f"predict_{loss}": second,
        }
    )


def tgsn_warmup_gate(history: Sequence[float], threshold: float) -> bool:
    """Open once the reconstruction loss improves by less than
    ``threshold`` (relative) from one epoch to the next."""
    if len(history) < 2:
        return False
    previous, current = float(history[-2]), float(history[-1])
    if previous <= 0.0:
        return True
    return (previous - current) / previous < threshold


class TgsnPredictor(Predictor):
    def __init__(self, model: TemporalGsn, wb: WalkbackConfig):
        self.model = model
        self.wb = wb
        self.history: List[HiddenStack] = []

    def reset(self, batch: int):
        self.history = []

    def step(self, x: Matrix) -> Matrix:
        gsn = self.model.gsn
        _, ending = gsn_reconstruct(gsn, x, self.wb, None, add_noise=False)
        window = self.model.transition.window
        self.history = (self.history + [ending.hiddens])[-window:]
        predicted = transition_predict(
            self.model.transition, self.model.padded(self.history)
        )
        tape = decode_chain(gsn, predicted, self.wb.k, None, add_noise=False)
        return tape.reconstruction


@kind.operation
def build(cfg: TrainConfig, width: int, rng: RandomSource) -> TemporalGsn:
    gsn = gsn_for(cfg, width, rng)
    return TemporalGsn(
        gsn, LinearTransition(cfg.context_window, gsn.hidden_sizes, rng)
    )


@kind.operation
def init_state(model: TemporalGsn, cfg: TrainConfig) -> TrainerState:
    trainer = TrainerState.with_optimizers(cfg.optimizer, "gsn", "transition")
    trainer.extras = {
        "gate_history": np.zeros(0),
        "gate_open": np.array(0.0),
    }
    return trainer


@kind.operation
def train_epoch(
    model: TemporalGsn,
    trainer: TrainerState,
    batches: List[np.ndarray],
    cfg: TrainConfig,
    rng: RandomSource,
) -> Dict[str, float]:
    gate_open = bool(trainer.extras["gate_open"])
    metrics = tgsn_em_epoch(
        model, batches, cfg.walkback, trainer, rng, gate_open, cfg.clip
    )
    history = np.append(
        trainer.extras["gate_history"], metrics[f"recon_{model.gsn.loss}"]
    )
    trainer.extras["gate_history"] = history
    if not gate_open and tgsn_warmup_gate(history, cfg.warmup_threshold):
        log.info("reconstruction settled, adding the prediction term")
        trainer.extras["gate_open"] = np.array(1.0)
    return metrics


@kind.operation
def predictor(model: TemporalGsn, cfg: TrainConfig) -> Predictor:
    return TgsnPredictor(model, cfg.walkback)


@kind.operation
def gradcheck(widths: List[int], seed: int) -> Dict[str, float]:
    rng = RandomSource(seed)
    gsn = GsnParams(
        widths,
        noise=NoiseConfig(salt_pepper_p=0.2, gauss_sigma=0.5),
        rng=rng.split(),
    )
    model = TemporalGsn(gsn, LinearTransition(2, widths[1:], rng.split()))
    history = [
        [np.tanh(rng.normal(0.0, 1.0, (3, w))) for w in widths[1:]]
        for _ in range(2)
    ]
    target = (rng.uniform((3, widths[0])) < 0.5).astype(np.float64)
    return {
        "transition": check_module(
            model,
            lambda: prediction_path(
                model, history, target, 2, RandomSource(seed)
            ),
        )
    }
