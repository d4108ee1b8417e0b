import numpy as np
import pytest

from seqgsn.errors import ShapeError
from seqgsn.gsn import ChainTape, GsnParams, GsnState, WalkbackConfig
from seqgsn.gsn import dae_train_step, decode_chain, gsn_reconstruct
from seqgsn.gsn import gsn_sample_chain, gsn_update_step, reconstruction_loss
from seqgsn.gsn import sequential_walkback_pairs, visible_loss
from seqgsn.gsn import walkback_chain, walkback_length, walkback_pairs
from seqgsn.nn import bce_loss
from seqgsn.tensor import NoiseConfig, RandomSource


def _binary(rng, shape):
    return (rng.uniform(shape) < 0.5).astype(np.float64)


def test_one_layer_chain_matches_dae_step():
    noise = NoiseConfig(salt_pepper_p=0.3, gauss_sigma=0.0)
    chain = GsnParams([6, 4], noise=noise, rng=RandomSource(1))
    dae = GsnParams([6, 4], noise=noise, rng=RandomSource(1))
    data = RandomSource(2)
    for step in range(50):
        x = _binary(data, (5, 6))
        loss_a, grads_a, _ = reconstruction_loss(
            chain, x, 1, RandomSource(3, (step,))
        )
        loss_b, grads_b = dae_train_step(
            dae, x, noise, RandomSource(3, (step,))
        )
        assert loss_a == loss_b
        for name, g in grads_b.items():
            np.testing.assert_array_equal(grads_a[name], g)
        chain.load_parameters(
            {n: v - 0.1 * grads_a[n] for n, v in chain.params.items()}
        )
        dae.load_parameters(
            {n: v - 0.1 * grads_b[n] for n, v in dae.params.items()}
        )


def test_dae_step_rejects_deep_networks():
    with pytest.raises(ValueError):
        dae_train_step(
            GsnParams([4, 3, 3]), np.zeros((1, 4)), NoiseConfig(), None
        )


@pytest.mark.parametrize("p", [0.0, 0.5, 0.9])
def test_geometric_walkback_length(p):
    gsn = GsnParams([2, 2], rng=RandomSource(0))
    wb = WalkbackConfig(continue_p=p, use_geometric=True)
    rng = RandomSource(5)
    x = np.array([[1.0, 0.0]])
    runs = 10_000
    total = sum(len(walkback_pairs(gsn, x, wb, rng)) for _ in range(runs))
    assert total / runs == pytest.approx(1.0 / (1.0 - p), rel=0.05)


def test_walkback_length():
    rng = RandomSource(6)
    assert walkback_length(WalkbackConfig(k=3), rng) == 3
    never = WalkbackConfig(k=3, continue_p=0.0, use_geometric=True)
    assert {walkback_length(never, rng) for _ in range(100)} == {1}
    half = WalkbackConfig(continue_p=0.5, use_geometric=True)
    runs = [walkback_length(half, rng) for _ in range(10_000)]
    assert np.mean(runs) == pytest.approx(2.0, rel=0.05)


def test_fixed_walkback_yields_k_pairs():
    gsn = GsnParams([4, 3, 3], rng=RandomSource(0))
    x = np.ones((2, 4))
    pairs = walkback_pairs(gsn, x, WalkbackConfig(k=5), RandomSource(1))
    assert len(pairs) == 5
    for clean, sample in pairs:
        assert clean is x
        assert sample.shape == x.shape


def test_sample_chain_lengths():
    gsn = GsnParams([4, 3], rng=RandomSource(0))
    x = np.zeros((1, 4))
    assert gsn_sample_chain(gsn, x, 0, RandomSource(1)) == []
    assert len(gsn_sample_chain(gsn, x, 3, RandomSource(1))) == 3
    with pytest.raises(ValueError):
        gsn_sample_chain(gsn, x, -1, RandomSource(1))


def test_walkback_tape_clamps_the_input():
    gsn = GsnParams([4, 3, 3], rng=RandomSource(0))
    x = np.ones((2, 4))
    tape = walkback_chain(gsn, x, 3, None, add_noise=False)
    assert len(tape.visibles) == 3
    np.testing.assert_array_equal(tape.value(tape.current[0]), x)
    assert [h.shape for h in tape.hiddens()] == [(2, 3), (2, 3)]


def test_tape_rejects_bad_shapes():
    gsn = GsnParams([4, 3])
    with pytest.raises(ShapeError):
        ChainTape.start(gsn, np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        ChainTape.start(gsn, np.zeros((2, 4)), [np.zeros((2, 2))])


def test_decode_chain_returns_hidden_gradients():
    rng = RandomSource(0)
    gsn = GsnParams([4, 3], rng=rng)
    hiddens = [np.tanh(rng.normal(0.0, 1.0, (2, 3)))]
    tape = decode_chain(gsn, hiddens, 2, None, add_noise=False)
    loss, node_grads = visible_loss(tape, np.ones((2, 4)))
    _, leaves = tape.backward(node_grads)
    assert leaves[tape.inputs[1]].shape == (2, 3)


def test_sequential_walkback_counts():
    gsn = GsnParams([4, 3], rng=RandomSource(0))
    x = np.ones((2, 4))
    assert sequential_walkback_pairs(gsn, x, 0, RandomSource(1)) == []
    pairs = sequential_walkback_pairs(gsn, x, 3, RandomSource(1))
    assert len(pairs) == 3
    assert all(target is x for _, target in pairs)


def test_sequential_walkback_inverts_an_orthonormal_layer():
    gsn = GsnParams(
        [3, 3],
        hidden_activation="identity",
        visible_activation="identity",
        noise=NoiseConfig.off(),
    )
    q, _ = np.linalg.qr(RandomSource(0).normal(0.0, 1.0, (3, 3)))
    gsn.load_parameters({"W0": q})
    x = RandomSource(1).normal(0.0, 1.0, (4, 3))
    [(guess, target)] = sequential_walkback_pairs(
        gsn, x, 1, None, add_noise=False
    )
    np.testing.assert_allclose(guess, x, atol=1e-6)


def test_zero_network_sweep_decodes_one_half():
    gsn = GsnParams([4, 3, 3], noise=NoiseConfig.off())
    state = GsnState.start(gsn, np.ones((2, 4)))
    state = gsn_update_step(gsn, state, None)
    for h in state.hiddens:
        np.testing.assert_array_equal(h, np.zeros_like(h))
    np.testing.assert_array_equal(state.visible, np.full((2, 4), 0.5))
    np.testing.assert_array_equal(state.reconstruction, state.visible)


def test_one_layer_sweep_by_hand():
    gsn = GsnParams([2, 2], noise=NoiseConfig.off())
    gsn.load_parameters(
        {
            "W0": np.array([[1.0, 0.0], [0.5, -1.0]]),
            "b0": np.array([0.0, 0.2]),
            "b1": np.array([0.1, -0.1]),
        }
    )
    x = np.array([[1.0, 0.0]])
    state = gsn_update_step(gsn, GsnState.start(gsn, x), None)
    h = np.tanh([1.1, -0.1])
    v = 1.0 / (1.0 + np.exp(-np.array([h[0], 0.2 + 0.5 * h[0] - h[1]])))
    np.testing.assert_allclose(state.hiddens[0], [h], rtol=1e-12)
    np.testing.assert_allclose(state.visible, [v], rtol=1e-12)


def test_clamped_sweep_keeps_the_input():
    gsn = GsnParams([4, 3, 3], rng=RandomSource(0))
    x = np.array([[1.0, 0.0, 1.0, 0.0]])
    state = GsnState.start(gsn, np.full((1, 4), 0.5))
    for seed in range(3):
        state = gsn_update_step(gsn, state, RandomSource(seed), x)
        np.testing.assert_array_equal(state.visible, x)
        assert state.reconstruction.shape == x.shape
        assert not np.array_equal(state.reconstruction, x)


def test_reconstruct_shapes_and_determinism():
    gsn = GsnParams([4, 5, 3], rng=RandomSource(0))
    x = np.ones((2, 4))
    wb = WalkbackConfig(k=3)
    recon, ending = gsn_reconstruct(gsn, x, wb, RandomSource(1))
    assert recon.shape == (2, 4)
    assert [h.shape[1] for h in ending.hiddens] == gsn.layer_sizes[1:]
    again, _ = gsn_reconstruct(gsn, x, wb, RandomSource(1))
    np.testing.assert_array_equal(recon, again)


def test_trained_reconstruction_beats_one_half():
    gsn = GsnParams([4, 6], noise=NoiseConfig.off(), rng=RandomSource(0))
    x = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]])
    for _ in range(500):
        _, grads, _ = reconstruction_loss(gsn, x, 1, None, add_noise=False)
        gsn.load_parameters(
            {n: v - 0.5 * grads[n] for n, v in gsn.params.items()}
        )
    recon, _ = gsn_reconstruct(
        gsn, x, WalkbackConfig(k=8), None, add_noise=False
    )
    loss, _ = bce_loss(recon, x)
    baseline, _ = bce_loss(np.full_like(x, 0.5), x)
    assert loss < baseline
