"""Sequence encoder network: a stack of recurrent GSNs.

Level 0 works on the frames. Every level above it takes the LSTM output
of the level below as its visible layer and learns to reconstruct it and
to predict its next value. All levels train jointly on the sum of their
reconstruction and prediction losses with one optimizer; values passed
between levels are treated as constants.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeError
from ..experiment import TrainConfig
from ..gsn import GsnParams, WalkbackConfig, walkback_chain
from ..nn import GradClipConfig, Module, OptimizerState, Params, prefixed
from ..tensor import Activation, Matrix, NoiseConfig, RandomSource
from .base import ModelKind, Predictor, TrainerState, apply_update
from .base import check_module, epoch_means
from .rnngsn import LstmState, RecurrentGsn, RnnGsnStep, prediction_grads
from .rnngsn import rnngsn_decode, rnngsn_forward

log = logging.getLogger(__name__)

kind = ModelKind("sen", gradcheck_tolerance=1e-3)


class SenStack(Module):
    def __init__(self, levels: Sequence[RecurrentGsn]):
        super().__init__()
        if not levels:
            raise ValueError("a sequence encoder needs at least one level")
        for below, above in zip(levels, levels[1:]):
            if above.gsn.layer_sizes[0] != below.lstm.n_hidden:
                raise ShapeError(
                    "level input",
                    (above.gsn.layer_sizes[0],),
                    (below.lstm.n_hidden,),
                )
        self.children = {
            f"level{i}": level for i, level in enumerate(levels)
        }

    @classmethod
    def build(
        cls,
        width: int,
        layer_sizes: Sequence[int],
        lstm_size: int,
        n_levels: int,
        hidden_activation: Activation = "tanh",
        visible_activation: Activation = "sigmoid",
        noise: Optional[NoiseConfig] = None,
        taps: Optional[Sequence[int]] = None,
        tied: bool = True,
        rng: Optional[RandomSource] = None,
    ) -> "SenStack":
        noise = noise if noise is not None else NoiseConfig()
        levels = []
        for i in range(n_levels):
            if i == 0:
                sizes, visible, level_noise = width, visible_activation, noise
            else:
                sizes, visible = lstm_size, "identity"
                level_noise = noise.copy(update={"salt_pepper_p": 0.0})
            gsn = GsnParams(
                [sizes] + list(layer_sizes),
                tied=tied,
                hidden_activation=hidden_activation,
                visible_activation=visible,
                noise=level_noise,
                rng=rng,
            )
            levels.append(RecurrentGsn(gsn, lstm_size, taps, rng))
        return cls(levels)

    @property
    def levels(self) -> List[RecurrentGsn]:
        return list(self.children.values())

    def zero_states(self, batch: int) -> List[LstmState]:
        return [level.zero_state(batch) for level in self.levels]


@dataclass
class SenForward:
    steps: List[RnnGsnStep]

    @property
    def states(self) -> List[LstmState]:
        return [step.state for step in self.steps]


def sen_forward(
    stack: SenStack,
    x_t: Matrix,
    states: Sequence[LstmState],
    wb: WalkbackConfig,
    rng: Optional[RandomSource],
    add_noise: bool = True,
) -> SenForward:
    """Encode and transition level by level, bottom up."""
    steps = []
    inputs = x_t
    for level, state in zip(stack.levels, states):
        step = rnngsn_forward(level, inputs, state, wb, rng, add_noise)
        steps.append(step)
        inputs = step.state[0]
    return SenForward(steps)


def sen_targets(
    stack: SenStack,
    x_next: Matrix,
    states: Sequence[LstmState],
    wb: WalkbackConfig,
) -> List[Matrix]:
    """What every level should predict: x_next at the bottom, above it the
    LSTM output the level below produces when it sees x_next."""
    targets = [x_next]
    inputs = x_next
    for level, state in zip(stack.levels[:-1], states):
        tape = walkback_chain(level.gsn, inputs, wb.k, None, add_noise=False)
        (h, _), _ = level.lstm.step(level.tapped(tape.hiddens()), state)
        targets.append(h)
        inputs = h
    return targets


def sen_loss_and_grads(
    stack: SenStack,
    x_t: Matrix,
    x_next: Optional[Matrix],
    states: Sequence[LstmState],
    wb: WalkbackConfig,
    rng: Optional[RandomSource],
    add_noise: bool = True,
) -> Tuple[Dict[str, float], Params, List[LstmState]]:
    fwd = sen_forward(stack, x_t, states, wb, rng, add_noise)
    losses = {
        f"recon_{i}": step.recon_loss for i, step in enumerate(fwd.steps)
    }
    if x_next is not None:
        targets = sen_targets(stack, x_next, fwd.states, wb)
        for i, (level, step, target) in enumerate(
            zip(stack.levels, fwd.steps, targets)
        ):
            rnngsn_decode(level, step, wb, rng, target, add_noise)
            losses[f"predict_{i}"] = step.predict_loss

    grads = stack.zero_grads()
    for i, (level, step) in enumerate(zip(stack.levels, fwd.steps)):
        prefix = f"level{i}."
        node_grads = dict(step.recon_grads)
        if step.predict_tape is not None:
            decoder, rnn, d_tapped = prediction_grads(level, step)
            for name, g in prefixed(prefix + "gsn.", decoder).items():
                grads[name] += g
            for name, g in prefixed(prefix, rnn).items():
                grads[name] += g
            hidden_nodes = step.recon_tape.hidden_nodes()
            pieces = np.split(
                d_tapped, np.cumsum(level.tapped_widths())[:-1], axis=1
            )
            for tap, piece in zip(level.taps, pieces):
                node = hidden_nodes[tap - 1]
                node_grads[node] = node_grads.get(node, 0.0) + piece
        encoder, _ = step.recon_tape.backward(node_grads)
        for name, g in prefixed(prefix + "gsn.", encoder).items():
            grads[name] += g
    return losses, grads, fwd.states


def sen_train_step(
    stack: SenStack,
    x_t: Matrix,
    x_next: Optional[Matrix],
    states: Sequence[LstmState],
    wb: WalkbackConfig,
    opt: OptimizerState,
    rng: RandomSource,
    clip: Optional[GradClipConfig] = None,
) -> Tuple[Dict[str, float], List[LstmState]]:
    losses, grads, new_states = sen_loss_and_grads(
        stack, x_t, x_next, states, wb, rng
    )
    apply_update(stack, opt, grads, clip)
    return losses, new_states


class SenPredictor(Predictor):
    def __init__(self, stack: SenStack, wb: WalkbackConfig):
        self.stack = stack
        self.wb = wb
        self.states = None

    def reset(self, batch: int):
        self.states = self.stack.zero_states(batch)

    def step(self, x: Matrix) -> Matrix:
        fwd = sen_forward(
            self.stack, x, self.states, self.wb, None, add_noise=False
        )
        self.states = fwd.states
        tape = rnngsn_decode(
            self.stack.levels[0], fwd.steps[0], self.wb, None, add_noise=False
        )
        return tape.reconstruction


@kind.operation
def build(cfg: TrainConfig, width: int, rng: RandomSource) -> SenStack:
    return SenStack.build(
        width,
        cfg.layer_sizes,
        cfg.lstm_size,
        cfg.sen_levels,
        cfg.hidden_activation,
        cfg.visible,
        cfg.noise,
        cfg.taps,
        cfg.tied,
        rng,
    )


@kind.operation
def init_state(model: SenStack, cfg: TrainConfig) -> TrainerState:
    return TrainerState.with_optimizers(cfg.optimizer, "sen")


@kind.operation
def train_epoch(
    model: SenStack,
    trainer: TrainerState,
    batches: List[np.ndarray],
    cfg: TrainConfig,
    rng: RandomSource,
) -> Dict[str, float]:
    series = defaultdict(list)
    for batch in batches:
        states = model.zero_states(batch.shape[1])
        for t in range(len(batch)):
            x_next = batch[t + 1] if t + 1 < len(batch) else None
            losses, states = sen_train_step(
                model, batch[t], x_next, states, cfg.walkback,
                trainer["sen"], rng, cfg.clip,
            )
            for name, value in losses.items():
                series[name].append(value)
    loss = model.levels[0].gsn.loss
    rv = {
        f"recon_{loss}": series.get("recon_0", []),
        f"predict_{loss}": series.get("predict_0", []),
    }
    for name, values in sorted(series.items()):
        term, level = name.rsplit("_", 1)
        rv[f"{term}_level{level}"] = values
    return epoch_means(rv)


@kind.operation
def predictor(model: SenStack, cfg: TrainConfig) -> Predictor:
    return SenPredictor(model, cfg.walkback)


@kind.operation
def gradcheck(widths: List[int], seed: int) -> Dict[str, float]:
    rng = RandomSource(seed)
    stack = SenStack.build(
        widths[0],
        widths[1:],
        5,
        1,
        noise=NoiseConfig(salt_pepper_p=0.2, gauss_sigma=0.5),
        rng=rng.split(),
    )
    x = (rng.uniform((3, widths[0])) < 0.5).astype(np.float64)
    x_next = (rng.uniform((3, widths[0])) < 0.5).astype(np.float64)
    states = [
        (
            np.tanh(rng.normal(0.0, 1.0, (3, 5))),
            rng.normal(0.0, 1.0, (3, 5)),
        )
    ]
    wb = WalkbackConfig(k=2)

    def loss_and_grads():
        losses, grads, _ = sen_loss_and_grads(
            stack, x, x_next, states, wb, RandomSource(seed)
        )
        return sum(losses.values()), grads

    return {"sen_joint": check_module(stack, loss_and_grads)}
