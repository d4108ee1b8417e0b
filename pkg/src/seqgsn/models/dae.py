"""Denoising auto-encoder and walkback-trained GSN over single frames."""

import logging
from typing import Dict, List, Optional

import numpy as np

from ..experiment import TrainConfig
from ..gsn import GsnParams, WalkbackConfig, dae_train_step
from ..gsn import gsn_reconstruct, gsn_sample_chain, reconstruction_loss
from ..gsn import walkback_length, walkback_pairs
from ..tensor import Matrix, NoiseConfig, RandomSource
from .base import ModelKind, Predictor, TrainerState, apply_update
from .base import check_module, epoch_means, minibatches

log = logging.getLogger(__name__)

dae = ModelKind("dae")
gsn = ModelKind("gsn")


def input_noise_only(noise: NoiseConfig) -> NoiseConfig:
    return noise.copy(
        update=dict(
            gauss_mean=0.0,
            gauss_sigma=0.0,
            apply_pre_activation=False,
            apply_post_activation=False,
        )
    )


def gsn_for(
    cfg: TrainConfig,
    width: int,
    rng: Optional[RandomSource],
    layer_sizes: Optional[List[int]] = None,
    tied: Optional[bool] = None,
) -> GsnParams:
    return GsnParams(
        [width] + list(layer_sizes or cfg.layer_sizes),
        tied=cfg.tied if tied is None else tied,
        hidden_activation=cfg.hidden_activation,
        visible_activation=cfg.visible,
        noise=cfg.noise,
        rng=rng,
    )


def frames_of(batches: List[np.ndarray]) -> np.ndarray:
    return np.concatenate([b.reshape(-1, b.shape[-1]) for b in batches])


class FramePredictor(Predictor):
    """Next frame guessed as the noise-free reconstruction of this one."""

    def __init__(self, params: GsnParams, k: int):
        self.params = params
        self.walkback = WalkbackConfig(k=k)

    def step(self, x: Matrix) -> Matrix:
        recon, _ = gsn_reconstruct(
            self.params, x, self.walkback, None, add_noise=False
        )
        return recon


@dae.operation
def build(cfg: TrainConfig, width: int, rng: RandomSource) -> GsnParams:
    model = gsn_for(cfg, width, rng, tied=True)
    model.noise = input_noise_only(cfg.noise)
    return model


@dae.operation
@gsn.operation
def init_state(model: GsnParams, cfg: TrainConfig) -> TrainerState:
    return TrainerState.with_optimizers(cfg.optimizer, "gsn")


@dae.operation
def train_epoch(
    model: GsnParams,
    trainer: TrainerState,
    batches: List[np.ndarray],
    cfg: TrainConfig,
    rng: RandomSource,
) -> Dict[str, float]:
    losses, walkback_losses = [], []
    for x in minibatches(frames_of(batches), cfg.batch_size, rng):
        loss, grads = dae_train_step(model, x, model.noise, rng)
        if cfg.walkback.use_geometric:
            for _, sample in walkback_pairs(model, x, cfg.walkback, rng):
                extra_loss, extra = dae_train_step(
                    model, x, model.noise, rng, source=sample
                )
                grads = {name: g + extra[name] for name, g in grads.items()}
                walkback_losses.append(extra_loss)
        apply_update(model, trainer["gsn"], grads, cfg.clip)
        losses.append(loss)
    return epoch_means(
        {
            f"recon_{model.loss}": losses,
            f"walkback_{model.loss}": walkback_losses,
        }
    )


@dae.operation
def predictor(model: GsnParams, cfg: TrainConfig) -> Predictor:
    return FramePredictor(model, 1)


@dae.operation
@gsn.operation
def sample(
    model: GsnParams,
    cfg: TrainConfig,
    prime: np.ndarray,
    steps: int,
    rng: RandomSource,
) -> List[Matrix]:
    return gsn_sample_chain(model, prime[-1], steps, rng)


@dae.operation
def gradcheck(widths: List[int], seed: int) -> Dict[str, float]:
    rng = RandomSource(seed)
    noise = NoiseConfig(salt_pepper_p=0.2, gauss_sigma=0.0)
    model = GsnParams(widths[:2], noise=noise, rng=rng.split())
    x = (rng.uniform((5, widths[0])) < 0.5).astype(np.float64)
    return {
        "dae": check_module(
            model, lambda: dae_train_step(model, x, noise, RandomSource(seed))
        )
    }


@gsn.operation(name="build")
def build_gsn(cfg: TrainConfig, width: int, rng: RandomSource) -> GsnParams:
    return gsn_for(cfg, width, rng)


@gsn.operation(name="train_epoch")
def train_gsn_epoch(
    model: GsnParams,
    trainer: TrainerState,
    batches: List[np.ndarray],
    cfg: TrainConfig,
    rng: RandomSource,
) -> Dict[str, float]:
    losses = []
    for x in minibatches(frames_of(batches), cfg.batch_size, rng):
        k = walkback_length(cfg.walkback, rng)
        loss, grads, _ = reconstruction_loss(model, x, k, rng)
        apply_update(model, trainer["gsn"], grads, cfg.clip)
        losses.append(loss)
    return epoch_means({f"recon_{model.loss}": losses})


@gsn.operation(name="predictor")
def gsn_predictor(model: GsnParams, cfg: TrainConfig) -> Predictor:
    return FramePredictor(model, cfg.walkback.k)


@gsn.operation(name="gradcheck")
def gsn_gradcheck(widths: List[int], seed: int) -> Dict[str, float]:
    rng = RandomSource(seed)
    noise = NoiseConfig(salt_pepper_p=0.2, gauss_sigma=0.5)
    model = GsnParams(widths, noise=noise, rng=rng.split())
    x = (rng.uniform((4, widths[0])) < 0.5).astype(np.float64)

    def loss_and_grads():
        loss, grads, _ = reconstruction_loss(model, x, 2, RandomSource(seed))
        return loss, grads

    return {"walkback": check_module(model, loss_and_grads)}
