"""Stacked LSTM next-frame predictor trained with full backpropagation
through time."""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..experiment import TrainConfig
from ..nn import LOSSES, DenseLayer, LstmCell, Module, Params, loss_for
from ..tensor import Activation, Matrix, RandomSource
from .base import ModelKind, Predictor, TrainerState, apply_update
from .base import check_module, epoch_means
from .rnngsn import LstmState

log = logging.getLogger(__name__)

kind = ModelKind("lstm")


class LstmPredictor(Module):
    def __init__(
        self,
        width: int,
        hidden_sizes: Sequence[int],
        visible_activation: Activation = "sigmoid",
        rng: Optional[RandomSource] = None,
    ):
        super().__init__()
        n_in = width
        for i, size in enumerate(hidden_sizes):
            self.children[f"cell{i}"] = LstmCell(n_in, size, rng)
            n_in = size
        self.children["head"] = DenseLayer(
            n_in, width, visible_activation, rng
        )

    @property
    def cells(self) -> List[LstmCell]:
        return [
            child
            for name, child in self.children.items()
            if name.startswith("cell")
        ]

    @property
    def head(self) -> DenseLayer:
        return self.children["head"]

    @property
    def loss(self) -> str:
        return loss_for(self.head.activation)

    def zero_states(self, batch: int) -> List[LstmState]:
        return [cell.zero_state(batch) for cell in self.cells]

    def forward_step(self, x: Matrix, states: Sequence[LstmState]):
        inputs = x
        new_states, caches = [], []
        for cell, state in zip(self.cells, states):
            state, cache = cell.step(inputs, state)
            new_states.append(state)
            caches.append(cache)
            inputs = state[0]
        prediction, head_cache = self.head.forward(inputs)
        return prediction, new_states, (caches, head_cache)


def lstm_baseline_step(
    model: LstmPredictor, x_t: Matrix, states: Sequence[LstmState]
) -> Tuple[Matrix, List[LstmState]]:
    prediction, new_states, _ = model.forward_step(x_t, states)
    return prediction, new_states


def sequence_loss_and_grads(
    model: LstmPredictor,
    sequence: np.ndarray,
    states: Optional[Sequence[LstmState]] = None,
) -> Tuple[float, Params, List[LstmState]]:
    """Mean next-frame loss over a ``(T, B, D)`` sequence and its exact
    gradient through every step."""
    steps = sequence.shape[0] - 1
    if steps < 1:
        raise ValueError("a sequence needs at least two frames")
    if states is None:
        states = model.zero_states(sequence.shape[1])
    loss_fn = LOSSES[model.loss]
    total = 0.0
    tape = []
    for t in range(steps):
        prediction, states, caches = model.forward_step(sequence[t], states)
        loss, d_pred = loss_fn(prediction, sequence[t + 1])
        total += loss
        tape.append((caches, d_pred / steps))

    cells = model.cells
    grads = model.zero_grads()
    dh_next = [np.zeros_like(state[0]) for state in states]
    dc_next = [np.zeros_like(state[1]) for state in states]
    for (cell_caches, head_cache), d_pred in reversed(tape):
        d_above, head_grads = model.head.backward(head_cache, d_pred)
        for name, g in head_grads.items():
            grads[f"head.{name}"] += g
        for layer in reversed(range(len(cells))):
            dx, dh, dc, cell_grads = cells[layer].backward(
                cell_caches[layer], d_above + dh_next[layer], dc_next[layer]
            )
            dh_next[layer], dc_next[layer] = dh, dc
            for name, g in cell_grads.items():
                grads[f"cell{layer}.{name}"] += g
            d_above = dx
    return total / steps, grads, list(states)


class LstmStepPredictor(Predictor):
    def __init__(self, model: LstmPredictor):
        self.model = model
        self.states = None

    def reset(self, batch: int):
        self.states = self.model.zero_states(batch)

    def step(self, x: Matrix) -> Matrix:
        prediction, self.states = lstm_baseline_step(
            self.model, x, self.states
        )
        return prediction


@kind.operation
def build(cfg: TrainConfig, width: int, rng: RandomSource) -> LstmPredictor:
    return LstmPredictor(width, cfg.layer_sizes, cfg.visible, rng)


@kind.operation
def init_state(model: LstmPredictor, cfg: TrainConfig) -> TrainerState:
    return TrainerState.with_optimizers(cfg.optimizer, "lstm")


@kind.operation
def train_epoch(
    model: LstmPredictor,
    trainer: TrainerState,
    batches: List[np.ndarray],
    cfg: TrainConfig,
    rng: RandomSource,
) -> Dict[str, float]:
    losses = []
    for batch in batches:
        loss, grads, _ = sequence_loss_and_grads(model, batch)
        apply_update(model, trainer["lstm"], grads, cfg.clip)
        losses.append(loss)
    return epoch_means({f"predict_{model.loss}": losses})


@kind.operation
def predictor(model: LstmPredictor, cfg: TrainConfig) -> Predictor:
    return LstmStepPredictor(model)


@kind.operation
def gradcheck(widths: List[int], seed: int) -> Dict[str, float]:
    rng = RandomSource(seed)
    model = LstmPredictor(widths[0], widths[1:], rng=rng.split())
    sequence = (rng.uniform((4, 2, widths[0])) < 0.5).astype(np.float64)

    def loss_and_grads():
        loss, grads, _ = sequence_loss_and_grads(model, sequence)
        return loss, grads

    return {"lstm_bptt": check_module(model, loss_and_grads)}
