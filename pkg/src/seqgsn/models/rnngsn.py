"""Recurrent GSN: an LSTM over tapped GSN hiddens predicts the next stack.

The GSN learns to reconstruct the current frame with walkback. Its ending
hidden layers at the taps feed an LSTM whose projected output is a guess
of the next hidden stack, which the GSN then decodes. The reconstruction
loss trains the GSN only; the prediction loss trains the LSTM and the
projection only, through the GSN decoder held fixed.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ShapeError
from ..experiment import TrainConfig
from ..gsn import ChainTape, GsnParams, WalkbackConfig, decode_chain
from ..gsn import visible_loss, walkback_chain
from ..nn import DenseLayer, GradClipConfig, LstmCell, Module, Params
from ..nn import prefixed
from ..tensor import Matrix, NoiseConfig, RandomSource
from .base import ModelKind, Predictor, TrainerState, apply_update
from .base import check_module, epoch_means
from .dae import gsn_for

log = logging.getLogger(__name__)

kind = ModelKind("rnn_gsn")

LstmState = Tuple[Matrix, Matrix]


def default_taps(n_hidden: int) -> List[int]:
    if n_hidden >= 3:
        return [1, 3]
    return list(range(1, n_hidden + 1, 2))


class RecurrentGsn(Module):
    def __init__(
        self,
        gsn: GsnParams,
        lstm_size: int,
        taps: Optional[Sequence[int]] = None,
        rng: Optional[RandomSource] = None,
    ):
        super().__init__()
        n_hidden = gsn.n_layers - 1
        self.taps = list(taps) if taps else default_taps(n_hidden)
        if not all(1 <= tap <= n_hidden for tap in self.taps):
            raise ShapeError("lstm taps", self.taps, (1, n_hidden))
        n_in = sum(gsn.layer_sizes[tap] for tap in self.taps)
        self.children = {
            "gsn": gsn,
            "lstm": LstmCell(n_in, lstm_size, rng),
            "proj": DenseLayer(
                lstm_size, gsn.hidden_total, gsn.hidden_activation, rng
            ),
        }

    @property
    def gsn(self) -> GsnParams:
        return self.children["gsn"]

    @property
    def lstm(self) -> LstmCell:
        return self.children["lstm"]

    @property
    def proj(self) -> DenseLayer:
        return self.children["proj"]

    def zero_state(self, batch: int) -> LstmState:
        return self.lstm.zero_state(batch)

    def tapped(self, hiddens: Sequence[Matrix]) -> Matrix:
        return np.concatenate([hiddens[tap - 1] for tap in self.taps], axis=1)

    def tapped_widths(self) -> List[int]:
        return [self.gsn.layer_sizes[tap] for tap in self.taps]

    def split(self, flat: Matrix) -> List[Matrix]:
        return np.split(flat, np.cumsum(self.gsn.hidden_sizes)[:-1], axis=1)


@dataclass
class RnnGsnStep:
    recon_loss: float
    recon_tape: ChainTape
    recon_grads: Dict[int, Matrix]
    tapped: Matrix
    lstm_cache: tuple
    state: LstmState
    proj_cache: tuple
    predicted: List[Matrix]
    predict_tape: Optional[ChainTape] = None
    predict_loss: Optional[float] = None
    predict_grads: Optional[Dict[int, Matrix]] = None


def rnngsn_forward(
    model: RecurrentGsn,
    x_t: Matrix,
    state: LstmState,
    wb: WalkbackConfig,
    rng: Optional[RandomSource],
    add_noise: bool = True,
) -> RnnGsnStep:
    tape = walkback_chain(model.gsn, x_t, wb.k, rng, add_noise)
    loss, node_grads = visible_loss(tape, x_t)
    tapped = model.tapped(tape.hiddens())
    new_state, lstm_cache = model.lstm.step(tapped, state)
    flat, proj_cache = model.proj.forward(new_state[0])
    return RnnGsnStep(
        loss,
        tape,
        node_grads,
        tapped,
        lstm_cache,
        new_state,
        proj_cache,
        model.split(flat),
    )


def rnngsn_decode(
    model: RecurrentGsn,
    step: RnnGsnStep,
    wb: WalkbackConfig,
    rng: Optional[RandomSource],
    target: Optional[Matrix] = None,
    add_noise: bool = True,
) -> ChainTape:
    tape = decode_chain(model.gsn, step.predicted, wb.k, rng, add_noise)
    step.predict_tape = tape
    if target is not None:
        step.predict_loss, step.predict_grads = visible_loss(tape, target)
    return tape


def prediction_grads(
    model: RecurrentGsn, step: RnnGsnStep
) -> Tuple[Params, Params, Matrix]:
    """Decoder grads, LSTM + projection grads and the tapped-input grad."""
    tape = step.predict_tape
    decoder, leaves = tape.backward(step.predict_grads)
    d_flat = np.concatenate(
        [
            leaves.get(node, np.zeros_like(tape.value(node)))
            for node in tape.inputs[1:]
        ],
        axis=1,
    )
    dh, proj_grads = model.proj.backward(step.proj_cache, d_flat)
    d_tapped, _, _, lstm_grads = model.lstm.backward(step.lstm_cache, dh)
    rnn = prefixed("lstm.", lstm_grads)
    rnn.update(prefixed("proj.", proj_grads))
    return decoder, rnn, d_tapped


def rnngsn_train_step(
    model: RecurrentGsn,
    x_t: Matrix,
    x_next: Optional[Matrix],
    state: LstmState,
    wb: WalkbackConfig,
    opts: TrainerState,
    rng: RandomSource,
    clip: Optional[GradClipConfig] = None,
) -> Tuple[float, Optional[float], LstmState]:
    step = rnngsn_forward(model, x_t, state, wb, rng)
    recon_grads, _ = step.recon_tape.backward(step.recon_grads)
    rnn_grads = None
    if x_next is not None:
        rnngsn_decode(model, step, wb, rng, x_next)
        _, rnn_grads, _ = prediction_grads(model, step)
    apply_update(model, opts["gsn"], prefixed("gsn.", recon_grads), clip)
    if rnn_grads is not None:
        apply_update(model, opts["rnn"], rnn_grads, clip)
    return step.recon_loss, step.predict_loss, step.state


class RnnGsnPredictor(Predictor):
    def __init__(self, model: RecurrentGsn, wb: WalkbackConfig):
        self.model = model
        self.wb = wb
        self.state = None

    def reset(self, batch: int):
        self.state = self.model.zero_state(batch)

    def step(self, x: Matrix) -> Matrix:
        step = rnngsn_forward(
            self.model, x, self.state, self.wb, None, add_noise=False
        )
        self.state = step.state
        tape = rnngsn_decode(self.model, step, self.wb, None, add_noise=False)
        return tape.reconstruction


@kind.operation
def build(cfg: TrainConfig, width: int, rng: RandomSource) -> RecurrentGsn:
    return RecurrentGsn(
        gsn_for(cfg, width, rng), cfg.lstm_size, cfg.taps, rng
    )


@kind.operation
def init_state(model: RecurrentGsn, cfg: TrainConfig) -> TrainerState:
    return TrainerState.with_optimizers(cfg.optimizer, "gsn", "rnn")


@kind.operation
def train_epoch(
    model: RecurrentGsn,
    trainer: TrainerState,
    batches: List[np.ndarray],
    cfg: TrainConfig,
    rng: RandomSource,
) -> Dict[str, float]:
    recon, predict = [], []
    for batch in batches:
        state = model.zero_state(batch.shape[1])
        for t in range(len(batch)):
            x_next = batch[t + 1] if t + 1 < len(batch) else None
            recon_loss, predict_loss, state = rnngsn_train_step(
                model, batch[t], x_next, state, cfg.walkback, trainer, rng,
                cfg.clip,
            )
            recon.append(recon_loss)
            if predict_loss is not None:
                predict.append(predict_loss)
    loss = model.gsn.loss
    return epoch_means({f"recon_{loss}": recon, f"predict_{loss}": predict})


@kind.operation
def predictor(model: RecurrentGsn, cfg: TrainConfig) -> Predictor:
    return RnnGsnPredictor(model, cfg.walkback)


@kind.operation
def gradcheck(widths: List[int], seed: int) -> Dict[str, float]:
    rng = RandomSource(seed)
    gsn = GsnParams(
        widths,
        noise=NoiseConfig(salt_pepper_p=0.2, gauss_sigma=0.5),
        rng=rng.split(),
    )
    model = RecurrentGsn(gsn, 5, rng=rng.split())
    x = (rng.uniform((3, widths[0])) < 0.5).astype(np.float64)
    x_next = (rng.uniform((3, widths[0])) < 0.5).astype(np.float64)
    state = (
        np.tanh(rng.normal(0.0, 1.0, (3, 5))),
        rng.normal(0.0, 1.0, (3, 5)),
    )
    wb = WalkbackConfig(k=2)

    def loss_and_grads():
        step_rng = RandomSource(seed)
        step = rnngsn_forward(model, x, state, wb, step_rng)
        rnngsn_decode(model, step, wb, step_rng, x_next)
        _, rnn, _ = prediction_grads(model, step)
        return step.predict_loss, rnn

    return {"rnn_prediction": check_module(model, loss_and_grads)}
