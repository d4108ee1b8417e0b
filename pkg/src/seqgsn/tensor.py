"""Dense matrices, activations, seeded random streams and corruptions.

A Matrix is a 2-D ``float64`` numpy array with one example per row. Rows
are the batch axis everywhere in the package; biases broadcast row-wise.
"""

import logging
from typing import List, Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, confloat, validator

from .errors import ShapeError

log = logging.getLogger(__name__)

Matrix = np.ndarray
Activation = Literal["sigmoid", "tanh", "identity"]
Seed = Union[int, Sequence[int]]

_U32 = 0xFFFFFFFF


def as_matrix(values) -> Matrix:
    rv = np.asarray(values, dtype=np.float64)
    if rv.ndim == 1:
        rv = rv[np.newaxis, :]
    if rv.ndim != 2:
        raise ShapeError("expected a 2-D matrix", rv.shape)
    return rv


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("cannot multiply", a.shape, b.shape)
    return a @ b


def activate(m: Matrix, kind: Activation) -> Matrix:
    if kind == "sigmoid":
        # tanh form never overflows
        return 0.5 * (1.0 + np.tanh(0.5 * m))
    elif kind == "tanh":
        return np.tanh(m)
    elif kind == "identity":
        return m
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: Activation, y: Matrix) -> Matrix:
    """Derivative of the activation expressed through its output ``y``."""
    if kind == "sigmoid":
        return y * (1.0 - y)
    elif kind == "tanh":
        return 1.0 - y * y
    elif kind == "identity":
        return np.ones_like(y)
    raise ValueError(f"unknown activation {kind!r}")


def is_finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


class RandomSource:
    """Seeded, splittable random stream on the Philox counter generator.

    The same seed always yields the same stream, and ``split()`` hands out
    children keyed by their position so the tree of streams is
    reproducible as long as the splits happen in the same order.
    """

    def __init__(self, seed: Seed, spawn_key: Tuple[int, ...] = ()):
        if isinstance(seed, (list, tuple)):
            entropy = [int(s) for s in seed]
        else:
            entropy = int(seed)
        self.seed = seed
        self.spawn_key = tuple(spawn_key)
        sequence = np.random.SeedSequence(entropy, spawn_key=self.spawn_key)
        self._bits = np.random.Philox(sequence)
        self._gen = np.random.Generator(self._bits)
        self._children = 0

    def split(self) -> "RandomSource":
        child = RandomSource(self.seed, self.spawn_key + (self._children,))
        self._children += 1
        return child

    def uniform(self, shape=None) -> Union[float, np.ndarray]:
        return self._gen.random(shape)

    def normal(self, mean: float, sigma: float, shape) -> np.ndarray:
        return self._gen.normal(mean, sigma, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)

    def get_state(self) -> List[int]:
        """Full stream position as a list of 32-bit unsigned integers."""
        state = self._bits.state
        words = []
        for arr in (
            state["state"]["counter"],
            state["state"]["key"],
            state["buffer"],
        ):
            for value in arr:
                value = int(value)
                words.extend(((value >> 32) & _U32, value & _U32))
        words.extend(
            (
                int(state["buffer_pos"]),
                int(state["has_uint32"]),
                int(state["uinteger"]) & _U32,
                self._children,
            )
        )
        return words

    def set_state(self, words: Sequence[int]):
        words = [int(w) for w in words]
        if len(words) != 24:
            raise ValueError(f"expected 24 state words, got {len(words)}")

        def _u64(chunk):
            return np.array(
                [(hi << 32) | lo for hi, lo in zip(chunk[::2], chunk[1::2])],
                dtype=np.uint64,
            )

        state = self._bits.state
        state["state"]["counter"] = _u64(words[0:8])
        state["state"]["key"] = _u64(words[8:12])
        state["buffer"] = _u64(words[12:20])
        state["buffer_pos"] = words[20]
        state["has_uint32"] = words[21]
        state["uinteger"] = words[22]
        self._bits.state = state
        self._children = words[23]


def salt_pepper(m: Matrix, p: float, rng: RandomSource) -> Matrix:
    """Replace each element with probability ``p`` by a fair 0/1 coin."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"salt-and-pepper probability {p} outside [0, 1]")
    mask = rng.uniform(m.shape) < p
    coin = (rng.uniform(m.shape) < 0.5).astype(np.float64)
    return np.where(mask, coin, m)


def add_gaussian(
    m: Matrix, mean: float, sigma: float, rng: RandomSource
) -> Matrix:
    if sigma < 0:
        raise ValueError(f"negative sigma {sigma}")
    return m + rng.normal(mean, sigma, m.shape)


class NoiseConfig(BaseModel):
    salt_pepper_p: confloat(ge=0.0, le=1.0) = 0.4
    gauss_mean: float = 0.0
    gauss_sigma: confloat(ge=0.0) = 2.0
    apply_pre_activation: bool = True
    apply_post_activation: bool = True

    class Config:
        extra = "forbid"

    @classmethod
    def off(cls) -> "NoiseConfig":
        return cls(
            salt_pepper_p=0.0,
            gauss_sigma=0.0,
            apply_pre_activation=False,
            apply_post_activation=False,
        )

    @validator("gauss_mean")
    def _finite_mean(cls, v):
        if not np.isfinite(v):
            raise ValueError("gauss_mean must be finite")
        return v

    @property
    def gaussian(self) -> bool:
        return self.gauss_sigma > 0 or self.gauss_mean != 0

    def corrupt(self, x: Matrix, rng: RandomSource) -> Matrix:
        if self.salt_pepper_p > 0:
            return salt_pepper(x, self.salt_pepper_p, rng)
        return x

    def pre_activation(self, m: Matrix, rng: RandomSource) -> Matrix:
        if self.apply_pre_activation and self.gaussian:
            return add_gaussian(m, self.gauss_mean, self.gauss_sigma, rng)
        return m

    def post_activation(self, m: Matrix, rng: RandomSource) -> Matrix:
        if self.apply_post_activation and self.gaussian:
            return add_gaussian(m, self.gauss_mean, self.gauss_sigma, rng)
        return m
