import math
import struct
import zlib

import numpy as np
import pytest

from seqgsn import harness
from seqgsn.errors import BadMagicError, ConfigError, DatasetError
from seqgsn.errors import DivergenceError, IntegrityError
from seqgsn.errors import TruncatedCheckpointError, VersionMismatchError
from seqgsn.experiment import resolve_config
from seqgsn.models.base import Predictor, get_model_kind
from seqgsn.tensor import RandomSource

TOY = [
    "dataset.name=toy",
    "dataset.width=8",
    "subsequence_length=10",
    "batch_size=4",
    "layer_sizes=[6]",
    "lstm_size=5",
]


def _checkpoint():
    return harness.Checkpoint(
        {
            "model.W": np.arange(6.0).reshape(2, 3),
            "trainer.opt.lstm.step": np.array(4.0),
        },
        resolve_config(None, ["model=lstm"]),
        RandomSource(1).get_state(),
        3,
    )


def test_checkpoint_codec():
    data = harness.encode_checkpoint(_checkpoint())
    assert data[:4] == b"GSNC"
    decoded = harness.decode_checkpoint(data)
    assert decoded.epoch == 3
    assert decoded.config.model == "lstm"
    assert decoded.rng_state == RandomSource(1).get_state()
    np.testing.assert_array_equal(
        decoded.tensors["model.W"], np.arange(6.0).reshape(2, 3)
    )
    assert decoded.tensors["trainer.opt.lstm.step"].shape == ()
    assert harness.encode_checkpoint(decoded) == data


def test_checkpoint_faults():
    data = harness.encode_checkpoint(_checkpoint())
    for offset in range(8, len(data)):
        corrupt = bytearray(data)
        corrupt[offset] ^= 0xFF
        with pytest.raises(IntegrityError):
            harness.decode_checkpoint(bytes(corrupt))
    for cut in (data[:-4], data[:20], data[:4]):
        with pytest.raises(TruncatedCheckpointError):
            harness.decode_checkpoint(cut)
    with pytest.raises(BadMagicError):
        harness.decode_checkpoint(b"GSNX" + data[4:])
    with pytest.raises(VersionMismatchError):
        harness.decode_checkpoint(
            data[:4] + struct.pack("<I", 2) + data[8:]
        )


def test_checkpoint_malformed_records():
    body = bytearray(harness.encode_checkpoint(_checkpoint())[:-4])
    # first record is model.W: u16 length, 7 name bytes, rank, dims
    struct.pack_into("<I", body, 18, 0xFFFFFFFF)
    data = bytes(body) + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(IntegrityError):
        harness.decode_checkpoint(data)


def test_reserved_tensor_names():
    ckpt = _checkpoint()
    ckpt.tensors["__epoch__"] = np.array(1.0)
    with pytest.raises(ValueError):
        harness.encode_checkpoint(ckpt)


def test_checkpoint_files(tmp_path):
    path = tmp_path / harness.CHECKPOINT_NAME
    harness.save_checkpoint(path, _checkpoint())
    assert harness.load_checkpoint(path).epoch == 3
    assert not (tmp_path / (harness.CHECKPOINT_NAME + ".tmp")).exists()
    with pytest.raises(ConfigError):
        harness.load_checkpoint(tmp_path / "missing.gsnc")


def test_metrics_log(tmp_path):
    path = tmp_path / harness.METRICS_NAME
    log = harness.MetricsLog(path)
    log.add(1, "train", "predict_bce", 0.5)
    log.add(2, "train", "predict_bce", float("nan"))
    with pytest.raises(ValueError):
        log.add(1, "train", "predict_bce", 0.1)
    rows = harness.read_metrics(path)
    assert rows[0] == (1, "train", "predict_bce", 0.5)
    assert rows[1][1] == "diverged"
    assert math.isnan(rows[1][3])
    assert harness.MetricsLog(path).last_epoch == 2
    assert log.series("train", "predict_bce") == [0.5]


def test_image_grid(tmp_path):
    path = tmp_path / "grid.pgm"
    assert harness.emit_image_grid(np.zeros((1, 225)), 5, path) == (15, 15)
    frames = np.zeros((10, 225))
    frames[0] = 1.0
    frames[1] = 0.5
    assert harness.emit_image_grid(frames, 5, path) == (31, 79)
    data = path.read_bytes()
    header = b"P5\n79 31\n255\n"
    assert data.startswith(header)
    pixels = np.frombuffer(data[len(header) :], np.uint8).reshape(31, 79)
    assert (pixels[:15, :15] == 255).all()
    assert (pixels[:15, 16:31] == 128).all()
    assert (pixels[:15, 32:47] == 0).all()
    assert (pixels[15, :] == 255).all()
    assert (pixels[:, 15] == 255).all()
    with pytest.raises(ValueError):
        harness.emit_image_grid(np.zeros((2, 10)), 2, path)
    assert harness.emit_image_grid(np.zeros((2, 10)), 2, path, (2, 5)) == (
        2,
        11,
    )


class _Constant(Predictor):
    def __init__(self, value):
        self.value = value

    def step(self, x):
        return np.full_like(x, self.value)


def test_mse_against_known_values():
    sequence = np.array([[0.0], [1.0], [0.0]])
    assert harness.evaluate_mse(harness.CopyLastFrame(), [sequence]) == 1.0
    two = np.array([[0.0, 0.0], [2.0, 4.0]])
    assert harness.evaluate_mse(_Constant(1.0), [two]) == pytest.approx(5.0)
    scaled = harness.evaluate_mse(_Constant(1.0), [two], lambda x: 2.0 * x)
    assert scaled == pytest.approx(20.0)
    with pytest.raises(DatasetError):
        harness.evaluate_mse(_Constant(1.0), [np.zeros((1, 2))])


def test_mse_ignores_batching():
    rng = RandomSource(0)
    sequences = [rng.uniform((6, 4)) for _ in range(5)]
    sequences.append(rng.uniform((9, 4)))
    whole = harness.evaluate_mse(harness.CopyLastFrame(), sequences)
    single = harness.evaluate_mse(
        harness.CopyLastFrame(), sequences, batch_size=1
    )
    assert whole == pytest.approx(single, rel=1e-12)


def test_bce_against_known_values():
    def half(batch, horizons):
        return {h: np.full_like(batch[h:], 0.5) for h in horizons}

    sequences = [np.array([[0.0, 1.0]] * 4)]
    scores = harness.evaluate_bce(half, sequences, [2, 1])
    assert sorted(scores) == [1, 2]
    for value in scores.values():
        assert value == pytest.approx(math.log(2.0))
    with pytest.raises(DatasetError):
        harness.evaluate_bce(half, [np.full((3, 2), 2.0)], [1])
    with pytest.raises(ConfigError):
        harness.evaluate_bce(half, sequences, [0])


def test_horizon_support():
    cfg = resolve_config(None, ["model=lstm", *TOY])
    kind = get_model_kind("lstm")
    model = kind.run("build", cfg, 8, RandomSource(0))
    predict = harness.horizon_predictions(kind, model, cfg)
    batch = np.zeros((4, 1, 8))
    assert predict(batch, [1])[1].shape == (3, 1, 8)
    with pytest.raises(ConfigError):
        predict(batch, [1, 2])


def test_prepare_toy_data():
    cfg = resolve_config(None, ["model=lstm", *TOY])
    data = harness.prepare_data(cfg)
    assert data.width == 8
    assert [len(s) for s in data.test] == [13]
    batches = data.train_batches(1)
    assert [b.shape for b in batches] == [(10, 4, 8), (10, 1, 8)]
    again = data.train_batches(1)
    np.testing.assert_array_equal(batches[0], again[0])


def test_prepare_ball_data():
    cfg = resolve_config(
        None,
        [
            "model=lstm",
            "dataset.name=balls",
            "dataset.balls.frames=20",
            "dataset.balls.resolution=6",
            "dataset.videos_per_epoch=2",
            "dataset.test_videos=1",
            "subsequence_length=10",
        ],
    )
    data = harness.prepare_data(cfg)
    assert data.width == 36
    assert data.frame_shape == (6, 6)
    assert len(data.test) == 1
    assert data.train_batches(1)[0].shape == (10, 4, 36)
    assert not np.array_equal(
        data.train_batches(1)[0], data.train_batches(2)[0]
    )


def test_prepare_synthetic_mocap():
    cfg = resolve_config(None, ["model=lstm", "dataset.name=mocap"])
    data = harness.prepare_data(cfg)
    assert data.width == 49
    assert data.value_range == "unbounded"
    assert data.destandardize is not None
    assert len(data.test[0]) == 766


def _toy_config(model, *extra):
    return resolve_config(None, [f"model={model}", *TOY, *extra])


def test_zero_epochs_still_checkpoints(tmp_path):
    cfg = _toy_config("lstm", "epochs=0")
    run, metrics = harness.train(cfg, harness.prepare_data(cfg), tmp_path)
    assert metrics.rows == []
    ckpt = harness.load_checkpoint(tmp_path / harness.CHECKPOINT_NAME)
    assert ckpt.epoch == 0
    assert harness.restore_run(ckpt).epoch == 0


def test_training_is_deterministic():
    cfg = _toy_config("lstm", "epochs=2")
    first, _ = harness.train(cfg, harness.prepare_data(cfg))
    second, _ = harness.train(cfg, harness.prepare_data(cfg))
    for name, value in first.model.named_parameters().items():
        np.testing.assert_array_equal(
            second.model.named_parameters()[name], value
        )


@pytest.mark.parametrize("model", ["lstm", "tgsn"])
def test_resume_matches_a_straight_run(tmp_path, model):
    straight_cfg = _toy_config(model, "epochs=4")
    data = harness.prepare_data(straight_cfg)
    straight, _ = harness.train(straight_cfg, data)

    half_cfg = _toy_config(model, "epochs=2")
    harness.train(half_cfg, data, tmp_path)
    resumed, metrics = harness.train(
        straight_cfg, data, tmp_path, tmp_path / harness.CHECKPOINT_NAME
    )
    assert resumed.epoch == 4
    assert sorted({row[0] for row in metrics.rows}) == [1, 2, 3, 4]
    for name, value in straight.model.named_parameters().items():
        np.testing.assert_array_equal(
            resumed.model.named_parameters()[name], value
        )


def test_resume_rejects_another_config(tmp_path):
    cfg = _toy_config("lstm", "epochs=1")
    data = harness.prepare_data(cfg)
    harness.train(cfg, data, tmp_path)
    other = _toy_config("lstm", "epochs=2", "seed=5")
    with pytest.raises(ConfigError):
        harness.train(
            other, data, tmp_path, tmp_path / harness.CHECKPOINT_NAME
        )


def test_divergence_stops_the_run(tmp_path, monkeypatch):
    kind = get_model_kind("lstm")
    monkeypatch.setitem(
        kind.ops,
        "train_epoch",
        lambda *args: {"predict_bce": float("inf")},
    )
    cfg = _toy_config("lstm", "epochs=3")
    with pytest.raises(DivergenceError) as info:
        harness.train(cfg, harness.prepare_data(cfg), tmp_path)
    assert info.value.epoch == 1
    rows = harness.read_metrics(tmp_path / harness.METRICS_NAME)
    assert rows == [(1, "diverged", "predict_bce", float("inf"))]
    ckpt = harness.load_checkpoint(tmp_path / harness.CHECKPOINT_NAME)
    assert ckpt.epoch == 1


def test_gsn_reconstruction_improves():
    cfg = _toy_config(
        "gsn",
        "epochs=6",
        "dataset.pattern=constant",
        "lr=0.01",
        "noise.gauss_sigma=0.5",
        "noise.salt_pepper_p=0.1",
    )
    _, metrics = harness.train(cfg, harness.prepare_data(cfg))
    losses = metrics.series("train", "recon_bce")
    assert len(losses) == 6
    assert losses[-1] < losses[0]
    assert len(metrics.series("test", "mse")) == 6


def test_sampling_shapes():
    cfg = _toy_config("gsn", "epochs=0")
    data = harness.prepare_data(cfg)
    run, _ = harness.train(cfg, data)
    prime = np.stack([data.test[0][:5]], axis=1)
    frames = harness.sample_frames(run, prime, 4, RandomSource(0))
    assert frames.shape == (4, 1, 8)
    empty = harness.sample_frames(run, prime, 0, RandomSource(0))
    assert empty.shape == (0, 1, 8)

    lstm_cfg = _toy_config("lstm", "epochs=0")
    lstm_run, _ = harness.train(lstm_cfg, data)
    rolled = harness.sample_frames(lstm_run, prime, 3, RandomSource(0))
    assert rolled.shape == (3, 1, 8)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", ["dense", "lstm_cell"])
def test_layer_gradchecks(name, seed):
    errors, tolerance = harness.run_gradcheck(name, [4, 3], seed)
    assert tolerance == 1e-4
    assert max(errors.values()) <= tolerance
    with pytest.raises(ConfigError):
        harness.run_gradcheck(name, [4], 0)


def test_compare_writes_a_table(tmp_path):
    rows = harness.compare("toy", ["lstm"], 1, tmp_path, TOY[1:])
    names = [row["model"] for row in rows]
    assert names[:2] == ["lstm", "copy_last"]
    assert "sen" in names
    assert rows[0]["mse"] is not None
    assert rows[0]["reference"] is None
    lines = (tmp_path / "compare.csv").read_text().splitlines()
    assert lines[0] == "model,mse,reference"
    assert (tmp_path / "lstm" / harness.CONFIG_NAME).is_file()
    assert (tmp_path / "lstm" / harness.CHECKPOINT_NAME).is_file()
