"""Generative stochastic network chain.

Layer 0 is the visible layer. A sweep updates the odd layers from their
neighbours, then the even ones, so the visible layer is decoded from the
freshly updated layer 1. Hidden updates get Gaussian noise before and
after the activation; the visible layer only ever sees salt-and-pepper
corruption.

``ChainTape`` records an unrolled chain node by node so any loss on its
visible (or hidden) nodes can be backpropagated exactly. Noise draws are
additive constants on the tape, which is what makes the chain
differentiable.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, confloat, conint

from .errors import ShapeError
from .nn import LOSSES, Module, Params, glorot_uniform, loss_for
from .tensor import Activation, Matrix, NoiseConfig, RandomSource
from .tensor import activate, activation_grad, add_gaussian

log = logging.getLogger(__name__)


class WalkbackConfig(BaseModel):
    k: conint(ge=1) = 4
    continue_p: confloat(ge=0.0, lt=1.0) = 0.5
    use_geometric: bool = False

    class Config:
        extra = "forbid"


class GsnParams(Module):
    """Layer weights and biases, tied or untied.

    ``W{i}`` maps layer i up to layer i+1 with shape
    ``(layer_sizes[i], layer_sizes[i+1])``. Tied networks read the downward
    weights as the transpose of the same array; untied ones own a separate
    ``V{i}`` of shape ``(layer_sizes[i+1], layer_sizes[i])`` that starts as
    that transpose.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        tied: bool = True,
        hidden_activation: Activation = "tanh",
        visible_activation: Activation = "sigmoid",
        noise: Optional[NoiseConfig] = None,
        rng: Optional[RandomSource] = None,
    ):
        super().__init__()
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ValueError(f"invalid GSN layer sizes {list(layer_sizes)}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.tied = tied
        self.hidden_activation = hidden_activation
        self.visible_activation = visible_activation
        self.noise = noise if noise is not None else NoiseConfig()
        sizes = self.layer_sizes
        for i in range(len(sizes) - 1):
            if rng is None:
                weights = np.zeros((sizes[i], sizes[i + 1]))
            else:
                weights = glorot_uniform(sizes[i], sizes[i + 1], rng)
            self.params[f"W{i}"] = weights
            if not tied:
                self.params[f"V{i}"] = weights.T.copy()
        for i, size in enumerate(sizes):
            self.params[f"b{i}"] = np.zeros(size)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes)

    @property
    def hidden_sizes(self) -> List[int]:
        return self.layer_sizes[1:]

    @property
    def hidden_total(self) -> int:
        return sum(self.hidden_sizes)

    @property
    def loss(self) -> str:
        return loss_for(self.visible_activation)

    def up(self, i: int) -> Matrix:
        return self.params[f"W{i}"]

    def down(self, i: int) -> Matrix:
        if self.tied:
            return self.params[f"W{i}"].T
        return self.params[f"V{i}"]

    @property
    def up_weights(self) -> List[Matrix]:
        return [self.up(i) for i in range(self.n_layers - 1)]

    @property
    def down_weights(self) -> List[Matrix]:
        return [self.down(i) for i in range(self.n_layers - 1)]

    def activation(self, layer: int) -> Activation:
        if layer == 0:
            return self.visible_activation
        return self.hidden_activation

    def zero_hiddens(self, batch: int) -> List[Matrix]:
        return [np.zeros((batch, size)) for size in self.hidden_sizes]


@dataclass
class GsnState:
    activations: List[Matrix]
    reconstruction: Optional[Matrix] = None

    @property
    def visible(self) -> Matrix:
        return self.activations[0]

    @property
    def hiddens(self) -> List[Matrix]:
        return self.activations[1:]

    @classmethod
    def start(cls, params: GsnParams, x: Matrix) -> "GsnState":
        return cls([x] + params.zero_hiddens(x.shape[0]))

    def with_visible(self, x: Matrix) -> "GsnState":
        return GsnState([x] + self.hiddens, self.reconstruction)


@dataclass
class _Update:
    node: int
    layer: int
    lower: Optional[int]
    upper: Optional[int]
    activated: Matrix


@dataclass
class ChainTape:
    """Recorded unrolled chain.

    ``current[j]`` is the node holding layer j's latest value, ``inputs``
    the leaf nodes the chain started from and ``visibles`` every decoded
    visible node in order.
    """

    gsn: GsnParams
    params: Params = field(default_factory=dict)
    values: List[Matrix] = field(default_factory=list)
    ops: List[_Update] = field(default_factory=list)
    current: List[int] = field(default_factory=list)
    inputs: List[int] = field(default_factory=list)
    visibles: List[int] = field(default_factory=list)

    @classmethod
    def start(
        cls,
        gsn: GsnParams,
        visible: Matrix,
        hiddens: Optional[List[Matrix]] = None,
    ) -> "ChainTape":
        tape = cls(gsn, dict(gsn.params))
        batch = visible.shape[0]
        if visible.shape[1] != gsn.layer_sizes[0]:
            raise ShapeError(
                "visible layer", visible.shape, (batch, gsn.layer_sizes[0])
            )
        if hiddens is None:
            hiddens = gsn.zero_hiddens(batch)
        if len(hiddens) != gsn.n_layers - 1:
            raise ShapeError(
                "hidden stack",
                (len(hiddens),),
                (gsn.n_layers - 1,),
            )
        for h, size in zip(hiddens, gsn.hidden_sizes):
            if h.shape != (batch, size):
                raise ShapeError("hidden layer", h.shape, (batch, size))
        tape.current = [tape.leaf(visible)] + [tape.leaf(h) for h in hiddens]
        tape.inputs = list(tape.current)
        return tape

    def leaf(self, value: Matrix) -> int:
        self.values.append(value)
        return len(self.values) - 1

    def _down(self, i: int) -> Matrix:
        if self.gsn.tied:
            return self.params[f"W{i}"].T
        return self.params[f"V{i}"]

    def update(
        self, layer: int, rng: Optional[RandomSource], add_noise: bool = True
    ) -> int:
        p = self.params
        pre = p[f"b{layer}"]
        lower = upper = None
        if layer > 0:
            lower = self.current[layer - 1]
            pre = pre + self.values[lower] @ p[f"W{layer - 1}"]
        if layer < self.gsn.n_layers - 1:
            upper = self.current[layer + 1]
            pre = pre + self.values[upper] @ self._down(layer)
        noise = self.gsn.noise
        if layer > 0 and add_noise:
            pre = noise.pre_activation(pre, rng)
        activated = activate(pre, self.gsn.activation(layer))
        out = activated
        if layer > 0 and add_noise:
            out = noise.post_activation(activated, rng)
        node = self.leaf(out)
        self.ops.append(_Update(node, layer, lower, upper, activated))
        self.current[layer] = node
        return node

    def decode_visible(self, rng=None, add_noise: bool = True) -> int:
        node = self.update(0, rng, add_noise)
        self.visibles.append(node)
        return node

    def sweep(
        self,
        rng: Optional[RandomSource],
        add_noise: bool = True,
        clamp: Optional[int] = None,
    ) -> int:
        """One odd/even pass; returns the decoded visible node.

        With ``clamp`` the visible layer is put back to that node after
        decoding, so the next sweep reads the clamped input again.
        """
        n = self.gsn.n_layers
        for layer in range(1, n, 2):
            self.update(layer, rng, add_noise)
        node = None
        for layer in range(0, n, 2):
            if layer == 0:
                node = self.decode_visible(rng, add_noise)
            else:
                self.update(layer, rng, add_noise)
        if clamp is not None:
            self.current[0] = clamp
        return node

    def value(self, node: int) -> Matrix:
        return self.values[node]

    @property
    def reconstruction(self) -> Matrix:
        return self.values[self.visibles[-1]]

    def hidden_nodes(self) -> List[int]:
        return self.current[1:]

    def hiddens(self) -> List[Matrix]:
        return [self.values[node] for node in self.current[1:]]

    def backward(
        self, node_grads: Dict[int, Matrix]
    ) -> Tuple[Params, Dict[int, Matrix]]:
        """Parameter gradients plus whatever reached the leaf nodes."""
        grads = {
            name: np.zeros_like(value) for name, value in self.params.items()
        }
        pending = dict(node_grads)
        for op in reversed(self.ops):
            d = pending.pop(op.node, None)
            if d is None:
                continue
            kind = self.gsn.activation(op.layer)
            dpre = d * activation_grad(kind, op.activated)
            grads[f"b{op.layer}"] += dpre.sum(axis=0)
            if op.upper is not None:
                upper = self.values[op.upper]
                if self.gsn.tied:
                    grads[f"W{op.layer}"] += dpre.T @ upper
                else:
                    grads[f"V{op.layer}"] += upper.T @ dpre
                pending[op.upper] = (
                    pending.get(op.upper, 0.0)
                    + dpre @ self._down(op.layer).T
                )
            if op.lower is not None:
                lower = self.values[op.lower]
                weights = self.params[f"W{op.layer - 1}"]
                grads[f"W{op.layer - 1}"] += lower.T @ dpre
                pending[op.lower] = pending.get(op.lower, 0.0) + (
                    dpre @ weights.T
                )
        return grads, pending


def visible_loss(
    tape: ChainTape, target: Matrix, nodes: Optional[List[int]] = None
) -> Tuple[float, Dict[int, Matrix]]:
    """Mean over ``nodes`` (default: every decoded visible) of the loss."""
    nodes = tape.visibles if nodes is None else nodes
    fn = LOSSES[tape.gsn.loss]
    total = 0.0
    grads = {}
    for node in nodes:
        loss, grad = fn(tape.values[node], target)
        total += loss
        grads[node] = grad / len(nodes)
    return total / len(nodes), grads


def walkback_chain(
    params: GsnParams,
    x: Matrix,
    k: int,
    rng: Optional[RandomSource],
    add_noise: bool = True,
    corrupt: bool = True,
) -> ChainTape:
    """k sweeps with the visible layer clamped to a corrupted ``x``."""
    if add_noise and corrupt:
        x = params.noise.corrupt(x, rng)
    tape = ChainTape.start(params, x)
    clamp = tape.current[0]
    for _ in range(k):
        tape.sweep(rng, add_noise, clamp=clamp)
    return tape


def decode_chain(
    params: GsnParams,
    hiddens: List[Matrix],
    steps: int,
    rng: Optional[RandomSource],
    add_noise: bool = True,
) -> ChainTape:
    """Decode a hidden stack, then let the chain run free for the rest.

    The hidden matrices become the tape's leaf inputs, so their gradients
    come back from ``backward`` under ``tape.inputs[1:]``.
    """
    batch = hiddens[0].shape[0]
    visible = np.zeros((batch, params.layer_sizes[0]))
    tape = ChainTape.start(params, visible, list(hiddens))
    tape.decode_visible(rng, add_noise)
    for _ in range(steps - 1):
        tape.sweep(rng, add_noise)
    return tape


def reconstruction_loss(
    params: GsnParams,
    x: Matrix,
    k: int,
    rng: Optional[RandomSource],
    add_noise: bool = True,
) -> Tuple[float, Params, ChainTape]:
    tape = walkback_chain(params, x, k, rng, add_noise)
    loss, node_grads = visible_loss(tape, x)
    grads, _ = tape.backward(node_grads)
    return loss, grads, tape


def gsn_update_step(
    params: GsnParams,
    state: GsnState,
    rng: Optional[RandomSource],
    clamp_visible: Optional[Matrix] = None,
    add_noise: bool = True,
) -> GsnState:
    visible = state.visible if clamp_visible is None else clamp_visible
    tape = ChainTape.start(params, visible, state.hiddens)
    clamp = tape.current[0] if clamp_visible is not None else None
    recon = tape.sweep(rng, add_noise, clamp=clamp)
    return GsnState(
        [tape.values[node] for node in tape.current], tape.values[recon]
    )


def dae_train_step(
    params: GsnParams,
    x: Matrix,
    noise: NoiseConfig,
    rng: RandomSource,
    source: Optional[Matrix] = None,
) -> Tuple[float, Params]:
    """Plain denoising auto-encoder step on a one-hidden-layer GSN.

    ``source`` is what gets corrupted and encoded (``x`` itself unless a
    walkback sample is given); the target is always the clean ``x``.
    """
    if params.n_layers != 2 or not params.tied:
        raise ValueError("a denoising auto-encoder has one tied hidden layer")
    if x.shape[1] != params.layer_sizes[0]:
        raise ShapeError(
            "dae input", x.shape, (x.shape[0], params.layer_sizes[0])
        )
    W, b0, b1 = params.params["W0"], params.params["b0"], params.params["b1"]
    corrupted = noise.corrupt(x if source is None else source, rng)
    h = activate(b1 + corrupted @ W, params.hidden_activation)
    y = activate(b0 + h @ W.T, params.visible_activation)
    loss, dy = LOSSES[params.loss](y, x)

    dW = np.zeros_like(W)
    db0 = np.zeros_like(b0)
    db1 = np.zeros_like(b1)
    dpre_v = dy * activation_grad(params.visible_activation, y)
    db0 += dpre_v.sum(axis=0)
    dW += dpre_v.T @ h
    dh = dpre_v @ W
    dpre_h = dh * activation_grad(params.hidden_activation, h)
    db1 += dpre_h.sum(axis=0)
    dW += corrupted.T @ dpre_h
    return loss, {"W0": dW, "b0": db0, "b1": db1}


def _corrupt_and_step(params, state, rng, add_noise) -> GsnState:
    visible = state.visible
    if add_noise:
        visible = params.noise.corrupt(visible, rng)
    return gsn_update_step(
        params, state.with_visible(visible), rng, add_noise=add_noise
    )


def walkback_length(wb: WalkbackConfig, rng: RandomSource) -> int:
    """Chain steps for one walkback: ``wb.k``, or geometric from one."""
    if not wb.use_geometric:
        return wb.k
    steps = 1
    while rng.uniform() < wb.continue_p:
        steps += 1
    return steps


def walkback_pairs(
    params: GsnParams,
    x: Matrix,
    wb: WalkbackConfig,
    rng: RandomSource,
    add_noise: bool = True,
) -> List[Tuple[Matrix, Matrix]]:
    """(clean x, chain reconstruction) training pairs.

    The chain corrupts its own latest sample before every step. Fixed mode
    yields exactly ``wb.k`` pairs; geometric mode keeps going while a
    uniform draw is below ``wb.continue_p`` and always keeps the last one.
    """
    state = GsnState.start(params, x)
    pairs = []
    if wb.use_geometric:
        state = _corrupt_and_step(params, state, rng, add_noise)
        while rng.uniform() < wb.continue_p:
            pairs.append((x, state.visible))
            state = _corrupt_and_step(params, state, rng, add_noise)
        pairs.append((x, state.visible))
    else:
        for _ in range(wb.k):
            state = _corrupt_and_step(params, state, rng, add_noise)
            pairs.append((x, state.visible))
    return pairs


def gsn_sample_chain(
    params: GsnParams,
    x0: Matrix,
    steps: int,
    rng: RandomSource,
    add_noise: bool = True,
) -> List[Matrix]:
    if steps < 0:
        raise ValueError(f"negative step count {steps}")
    state = GsnState.start(params, x0)
    samples = []
    for _ in range(steps):
        state = _corrupt_and_step(params, state, rng, add_noise)
        samples.append(state.visible)
    return samples


def gsn_reconstruct(
    params: GsnParams,
    x: Matrix,
    wb: WalkbackConfig,
    rng: Optional[RandomSource],
    add_noise: bool = True,
) -> Tuple[Matrix, GsnState]:
    tape = walkback_chain(params, x, wb.k, rng, add_noise)
    recon = tape.reconstruction
    return recon, GsnState([recon] + tape.hiddens(), recon)


def sequential_walkback_pairs(
    params: GsnParams,
    x: Matrix,
    k: int,
    rng: Optional[RandomSource],
    add_noise: bool = True,
) -> List[Tuple[Matrix, Matrix]]:
    """(x', x) pairs from perturbed guesses of the hidden past.

    Each step walks down the network backwards (transposed weights,
    negated biases), perturbs every hidden layer with the hidden Gaussian
    noise and decodes the result again.
    """
    pairs = []
    noise = params.noise
    for _ in range(k):
        hiddens = []
        below = x
        for i in range(params.n_layers - 1):
            pre = (below - params.params[f"b{i}"]) @ params.down(i).T
            below = activate(pre, params.hidden_activation)
            hiddens.append(below)
        if add_noise and noise.gaussian:
            hiddens = [
                add_gaussian(h, noise.gauss_mean, noise.gauss_sigma, rng)
                for h in hiddens
            ]
        tape = decode_chain(params, hiddens, 1, rng, add_noise=False)
        pairs.append((tape.reconstruction, x))
    return pairs
