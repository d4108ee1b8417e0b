"""Untied GSN run online as a recurrent network.

At every time step the chain runs k free sweeps starting from the current
frame and the hidden state carried over from the previous step. The
visible decoded on sweep h is the guess for frame t+h; guesses wait in a
buffer until their frame arrives and are then trained against it.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from ..errors import ConfigError, SequenceError
from ..experiment import TrainConfig
from ..gsn import ChainTape, GsnParams, sequential_walkback_pairs
from ..gsn import visible_loss, walkback_chain
from ..nn import LOSSES, GradClipConfig, OptimizerState
from ..tensor import Matrix, NoiseConfig, RandomSource
from .base import ModelKind, Predictor, TrainerState, apply_update
from .base import check_module, epoch_means
from .dae import gsn_for

log = logging.getLogger(__name__)

kind = ModelKind("untied_gsn")


@dataclass
class BufferedPrediction:
    origin: int
    horizon: int
    tape: ChainTape
    node: int

    @property
    def target(self) -> int:
        return self.origin + self.horizon

    @property
    def value(self) -> Matrix:
        return self.tape.value(self.node)


class PredictionBuffer:
    """Pending predictions keyed by the time step they predict."""

    def __init__(self, depth: int):
        self.depth = depth
        self.entries: Dict[int, List[BufferedPrediction]] = {}

    def __len__(self):
        return len(self.entries)

    def targets(self) -> List[int]:
        return sorted(self.entries)

    def add(self, prediction: BufferedPrediction):
        if not 1 <= prediction.horizon <= self.depth:
            raise SequenceError(
                f"horizon {prediction.horizon} outside 1..{self.depth}"
            )
        self.entries.setdefault(prediction.target, []).append(prediction)

    def pop(self, t: int) -> List[BufferedPrediction]:
        stale = [target for target in self.entries if target < t]
        if stale:
            raise SequenceError(
                f"predictions for steps {sorted(stale)} were never matched, "
                f"now at step {t}"
            )
        return self.entries.pop(t, [])

    def clear(self):
        self.entries = {}


class OnlineStep(NamedTuple):
    loss: Optional[float]
    buffer: PredictionBuffer
    hiddens: List[Matrix]
    horizon_losses: Dict[int, float]


def untied_gsn_online_step(
    gsn: GsnParams,
    x_t: Matrix,
    t: int,
    buf: PredictionBuffer,
    k: int,
    opt: OptimizerState,
    rng: RandomSource,
    hiddens: Optional[List[Matrix]] = None,
    clip: Optional[GradClipConfig] = None,
    sequential: int = 0,
    add_noise: bool = True,
) -> OnlineStep:
    """Train on the predictions made for ``t``, then predict t+1..t+k.

    Each buffered prediction keeps the tape it was computed on, so its
    gradient is exact for the parameters it was made with.
    """
    if gsn.tied:
        raise ValueError("the online step trains an untied GSN")
    if k < 2 * (gsn.n_layers - 1):
        raise ValueError(
            f"k = {k} is below twice the hidden layer count "
            f"{gsn.n_layers - 1}"
        )
    matched = buf.pop(t)
    loss_fn = LOSSES[gsn.loss]
    grads = gsn.zero_grads()
    total = 0.0
    horizon_losses = {}
    for prediction in matched:
        loss, grad = loss_fn(prediction.value, x_t)
        total += loss
        horizon_losses[prediction.horizon] = loss
        step_grads, _ = prediction.tape.backward(
            {prediction.node: grad / len(matched)}
        )
        for name, g in step_grads.items():
            grads[name] += g
    if sequential:
        pairs = sequential_walkback_pairs(gsn, x_t, sequential, rng, add_noise)
        for source, target in pairs:
            tape = walkback_chain(
                gsn, source, 1, rng, add_noise, corrupt=False
            )
            _, node_grads = visible_loss(tape, target)
            step_grads, _ = tape.backward(node_grads)
            for name, g in step_grads.items():
                grads[name] += g / sequential
    if matched or sequential:
        apply_update(gsn, opt, grads, clip)

    start = gsn.noise.corrupt(x_t, rng) if add_noise else x_t
    tape = ChainTape.start(gsn, start, hiddens)
    carried = None
    for horizon in range(1, k + 1):
        node = tape.sweep(rng, add_noise)
        if horizon == 1:
            carried = tape.hiddens()
        buf.add(BufferedPrediction(t, horizon, tape, node))
    return OnlineStep(
        total / len(matched) if matched else None,
        buf,
        carried,
        horizon_losses,
    )


class UntiedPredictor(Predictor):
    def __init__(self, gsn: GsnParams, k: int):
        self.gsn = gsn
        self.k = k
        self.hiddens = None

    def reset(self, batch: int):
        self.hiddens = None

    def chain(self, x: Matrix, sweeps: int) -> List[Matrix]:
        tape = ChainTape.start(self.gsn, x, self.hiddens)
        visibles = []
        for sweep in range(sweeps):
            visibles.append(tape.value(tape.sweep(None, add_noise=False)))
            if sweep == 0:
                self.hiddens = tape.hiddens()
        return visibles

    def step(self, x: Matrix) -> Matrix:
        return self.chain(x, 1)[0]


@kind.operation
def build(cfg: TrainConfig, width: int, rng: RandomSource) -> GsnParams:
    return gsn_for(cfg, width, rng, tied=False)


@kind.operation
def init_state(model: GsnParams, cfg: TrainConfig) -> TrainerState:
    return TrainerState.with_optimizers(cfg.optimizer, "gsn")


@kind.operation
def train_epoch(
    model: GsnParams,
    trainer: TrainerState,
    batches: List[np.ndarray],
    cfg: TrainConfig,
    rng: RandomSource,
) -> Dict[str, float]:
    k = cfg.walkback.k
    series = defaultdict(list)
    name = f"predict_{model.loss}"
    for batch in batches:
        buf = PredictionBuffer(k)
        hiddens = None
        for t in range(len(batch)):
            step = untied_gsn_online_step(
                model,
                batch[t],
                t,
                buf,
                k,
                trainer["gsn"],
                rng,
                hiddens,
                cfg.clip,
                cfg.sequential_walkbacks,
            )
            hiddens = step.hiddens
            if step.loss is not None:
                series[name].append(step.loss)
            for horizon, loss in step.horizon_losses.items():
                series[f"{model.loss}_h{horizon}"].append(loss)
    return epoch_means(dict(sorted(series.items())))


@kind.operation
def predictor(model: GsnParams, cfg: TrainConfig) -> Predictor:
    return UntiedPredictor(model, cfg.walkback.k)


@kind.operation
def predict_horizons(
    model: GsnParams,
    cfg: TrainConfig,
    sequence: np.ndarray,
    horizons: List[int],
) -> Dict[int, np.ndarray]:
    """Predictions ``rv[h][t]`` of frame t+h made after seeing frame t."""
    k = cfg.walkback.k
    for h in horizons:
        if not 1 <= h <= k:
            raise ConfigError(f"horizon {h} outside prediction depth 1..{k}")
    predictor = UntiedPredictor(model, k)
    predictor.reset(sequence.shape[1])
    depth = max(horizons)
    rv = {h: [] for h in horizons}
    for t in range(sequence.shape[0]):
        visibles = predictor.chain(sequence[t], depth)
        for h in horizons:
            if t + h < sequence.shape[0]:
                rv[h].append(visibles[h - 1])
    return {h: np.stack(rows) for h, rows in rv.items() if rows}


@kind.operation
def gradcheck(widths: List[int], seed: int) -> Dict[str, float]:
    rng = RandomSource(seed)
    model = GsnParams(
        widths,
        tied=False,
        noise=NoiseConfig(salt_pepper_p=0.2, gauss_sigma=0.5),
        rng=rng.split(),
    )
    x = (rng.uniform((3, widths[0])) < 0.5).astype(np.float64)
    target = (rng.uniform((3, widths[0])) < 0.5).astype(np.float64)

    def loss_and_grads():
        chain_rng = RandomSource(seed)
        tape = ChainTape.start(model, model.noise.corrupt(x, chain_rng))
        for _ in range(2):
            tape.sweep(chain_rng)
        loss, node_grads = visible_loss(tape, target)
        grads, _ = tape.backward(node_grads)
        return loss, grads

    return {"untied_chain": check_module(model, loss_and_grads)}
