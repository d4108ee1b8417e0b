"""Training runs, evaluation, checkpoints, metrics logs and image grids.

A checkpoint file is ``GSNC``, a little-endian u32 version, then one
record per tensor (u16 name length, UTF-8 name, u8 rank, u32 per dim,
float64 payload) and a trailing zlib CRC32 of everything before it. Model
and trainer tensors come first in name order, followed by the run
metadata records ``__config__``, ``__rng__`` and ``__epoch__``.
"""

import csv
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import get_settings
from .datasets import SequenceDataset, batch_windows, bouncing_balls
from .datasets import container_dataset, find_mnist, load_mocap_csv
from .datasets import make_subsequences, sequence_mnist, split_80_20
from .datasets import synthesize_mocap, toy_stream
from .errors import BadMagicError, ConfigError, DatasetError
from .errors import DivergenceError, IntegrityError
from .errors import TruncatedCheckpointError, VersionMismatchError
from .experiment import TrainConfig, preset_names, resolve_config
from .models.base import ModelKind, Predictor, TrainerState, check_module
from .models.base import get_model_kind
from .nn import BCE_EPSILON, DenseLayer, LstmCell, Module, Params, mse_loss
from .nn import prefixed
from .tensor import Matrix, RandomSource

log = logging.getLogger(__name__)

MAGIC = b"GSNC"
VERSION = 1
CHECKPOINT_NAME = "checkpoint.gsnc"
METRICS_NAME = "metrics.csv"
CONFIG_NAME = "config.json"
META_RECORDS = ("__config__", "__rng__", "__epoch__")
# Every complete checkpoint ends with this record header, an f64 epoch
# and the CRC32.
EPOCH_HEADER = struct.pack("<H", 9) + b"__epoch__" + struct.pack("<B", 0)
TRAILER_SIZE = len(EPOCH_HEADER) + 8 + 4

# Frame-level MSE on bouncing balls and motion capture as published for
# each model; the RBM rows have no implementation here.
REFERENCE_MSE = {
    "lstm": {"balls": 0.11, "mocap": 9.24},
    "rtrbm": {"balls": 2.11, "mocap": 20.1},
    "rnn_rbm": {"balls": 0.96, "mocap": 16.2},
    "untied_gsn": {"balls": 0.94, "mocap": 6.90},
    "tgsn": {"balls": 5.57, "mocap": 9.27},
    "rnn_gsn": {"balls": 5.28, "mocap": 11.49},
    "sen": {"balls": 19.0, "mocap": 50.8},
}


# Data


@dataclass
class ExperimentData:
    """Train batches per epoch plus the fixed held-out sequences."""

    width: int
    value_range: str
    test: List[np.ndarray]
    epoch_batches: Callable[[int], List[np.ndarray]]
    destandardize: Optional[Callable[[np.ndarray], np.ndarray]] = None
    frame_shape: Optional[Tuple[int, int]] = None

    def train_batches(self, epoch: int) -> List[np.ndarray]:
        return self.epoch_batches(epoch)


def _windowed(
    cfg: TrainConfig, ds: SequenceDataset, rng: RandomSource
) -> List[np.ndarray]:
    windows = make_subsequences(ds, cfg.subsequence_length, rng=rng)
    if not windows:
        raise DatasetError(
            f"no sequence holds a window of {cfg.subsequence_length} frames"
        )
    return batch_windows(windows, cfg.batch_size)


def _static(
    cfg: TrainConfig, train: SequenceDataset
) -> Callable[[int], List[np.ndarray]]:
    def batches(epoch: int) -> List[np.ndarray]:
        return _windowed(cfg, train, RandomSource(cfg.seed, (0, epoch)))

    return batches


def prepare_data(cfg: TrainConfig) -> ExperimentData:
    ref = cfg.dataset
    settings = get_settings()
    if ref.name == "balls":
        if ref.path is not None:
            videos = container_dataset(ref.path)
            n_test = ref.test_videos or settings.test_videos
            if len(videos) <= n_test:
                raise DatasetError(
                    f"{ref.path} holds {len(videos)} videos, "
                    f"need more than {n_test}"
                )
            train = SequenceDataset(videos.sequences[:-n_test])
            return ExperimentData(
                videos.width,
                videos.value_range,
                videos.sequences[-n_test:],
                _static(cfg, train),
                frame_shape=videos.frame_shape,
            )
        count = ref.videos_per_epoch or settings.videos_per_epoch

        def fresh(epoch: int) -> List[np.ndarray]:
            rng = RandomSource(cfg.seed, (0, epoch))
            videos = bouncing_balls(ref.balls, count, rng.split())
            return _windowed(cfg, videos, rng.split())

        test = bouncing_balls(
            ref.balls,
            ref.test_videos or settings.test_videos,
            RandomSource(cfg.seed, (1,)),
        )
        return ExperimentData(
            test.width,
            "unit_interval",
            test.sequences,
            fresh,
            frame_shape=test.frame_shape,
        )
    if ref.name == "mnist":
        directory = ref.path or settings.mnist_dir or settings.data_dir
        store = find_mnist(Path(directory), "train")
        test = sequence_mnist(
            find_mnist(Path(directory), "test"),
            RandomSource(cfg.seed, (1,)),
        )

        def redrawn(epoch: int) -> List[np.ndarray]:
            rng = RandomSource(cfg.seed, (0, epoch))
            return _windowed(cfg, sequence_mnist(store, rng.split()), rng)

        return ExperimentData(
            test.width,
            "unit_interval",
            test.sequences,
            redrawn,
            frame_shape=store.shape,
        )
    if ref.name == "mocap":
        path = ref.path or settings.mocap_csv
        if path is not None:
            ds = load_mocap_csv(Path(path))
        else:
            log.warning("no mocap CSV configured, using synthetic channels")
            ds = synthesize_mocap(RandomSource(cfg.seed, (4,)))
        train, test = split_80_20(ds)
        return ExperimentData(
            ds.width,
            "unbounded",
            test.standardized().sequences,
            _static(cfg, train.standardized()),
            destandardize=ds.destandardize,
        )
    if ref.path is not None:
        ds = container_dataset(ref.path)
    else:
        ds = toy_stream(
            ref.pattern, ref.width, ref.frames, RandomSource(cfg.seed, (4,))
        )
    train, test = split_80_20(ds)
    return ExperimentData(
        ds.width,
        ds.value_range,
        test.sequences,
        _static(cfg, train),
        frame_shape=ds.frame_shape,
    )


# Metrics


class MetricsLog:
    """Append-only ``epoch,split,metric,value`` rows, mirrored to CSV.

    Non-finite values are kept as they are and written under the split
    ``diverged``.
    """

    HEADER = ("epoch", "split", "metric", "value")

    def __init__(self, path: Optional[Path] = None):
        self.path = path
        self.rows: List[Tuple[int, str, str, float]] = []
        if path is not None:
            if path.is_file():
                self.rows = read_metrics(path)
            else:
                with open(path, "w", newline="") as f:
                    csv.writer(f).writerow(self.HEADER)

    @property
    def last_epoch(self) -> int:
        return self.rows[-1][0] if self.rows else 0

    def add(self, epoch: int, split: str, metric: str, value: float):
        if epoch < self.last_epoch:
            raise ValueError(
                f"epoch {epoch} logged after epoch {self.last_epoch}"
            )
        value = float(value)
        if not math.isfinite(value):
            split = "diverged"
        row = (epoch, split, metric, value)
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(
                    (epoch, split, metric, repr(value))
                )

    def series(self, split: str, metric: str) -> List[float]:
        return [
            value
            for _, row_split, name, value in self.rows
            if row_split == split and name == metric
        ]


def read_metrics(path: Path) -> List[Tuple[int, str, str, float]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != MetricsLog.HEADER:
            raise DatasetError(f"{path}: not a metrics file")
        return [
            (int(epoch), split, metric, float(value))
            for epoch, split, metric, value in reader
        ]


# Checkpoints


@dataclass
class Checkpoint:
    tensors: Params
    config: TrainConfig
    rng_state: List[int]
    epoch: int


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise EOFError
        rv = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return rv

    def raw(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise EOFError
        rv = self.data[self.offset : self.offset + size]
        self.offset += size
        return rv

    @property
    def done(self) -> bool:
        return self.offset == len(self.data)


def _record(name: str, value: np.ndarray) -> bytes:
    value = np.asarray(value, dtype="<f8")
    encoded = name.encode("utf-8")
    return b"".join(
        (
            struct.pack("<H", len(encoded)),
            encoded,
            struct.pack("<B", value.ndim),
            struct.pack(f"<{value.ndim}I", *value.shape),
            value.tobytes(),
        )
    )


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    config = np.frombuffer(ckpt.config.echo().encode("utf-8"), np.uint8)
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(ckpt.tensors):
        if name in META_RECORDS:
            raise ValueError(f"tensor name {name!r} is reserved")
        parts.append(_record(name, ckpt.tensors[name]))
    parts.append(_record("__config__", config))
    parts.append(_record("__rng__", np.array(ckpt.rng_state)))
    parts.append(_record("__epoch__", np.array(float(ckpt.epoch))))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _parse_records(body: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(body, 8)
    rv = {}
    while not reader.done:
        (length,) = reader.take("<H")
        name = reader.raw(length).decode("utf-8")
        (rank,) = reader.take("<B")
        shape = reader.take(f"<{rank}I")
        count = int(np.prod(shape)) if rank else 1
        payload = reader.raw(8 * count)
        rv[name] = np.frombuffer(payload, dtype="<f8").reshape(shape)
    return rv


def _ends_with_epoch(data: bytes) -> bool:
    # a cut file shifts the header; one flipped byte leaves it recognisable
    header = data[-TRAILER_SIZE : -TRAILER_SIZE + len(EPOCH_HEADER)]
    return sum(a != b for a, b in zip(header, EPOCH_HEADER)) <= 1


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedCheckpointError(f"only {len(data)} bytes")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise VersionMismatchError(
            f"checkpoint version {version}, expected {VERSION}"
        )
    if len(data) < 8 + TRAILER_SIZE:
        raise TruncatedCheckpointError(f"only {len(data)} bytes")
    body = data[:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        if not _ends_with_epoch(data):
            raise TruncatedCheckpointError("checkpoint lacks its trailer")
        raise IntegrityError("checkpoint checksum mismatch")
    try:
        records = _parse_records(body)
    except (EOFError, ValueError, UnicodeDecodeError) as e:
        raise IntegrityError(f"checkpoint records malformed: {e!r}") from e
    missing = [name for name in META_RECORDS if name not in records]
    if missing:
        raise IntegrityError(f"checkpoint lacks {missing}")
    text = records.pop("__config__").astype(np.uint8).tobytes()
    rng_state = [int(w) for w in records.pop("__rng__")]
    epoch = int(records.pop("__epoch__"))
    try:
        config = TrainConfig.parse_raw(text)
    except ValueError as e:
        raise IntegrityError(f"checkpoint config unreadable: {e}") from e
    return Checkpoint(
        {name: value.astype(np.float64) for name, value in records.items()},
        config,
        rng_state,
        epoch,
    )


def save_checkpoint(path: Path, ckpt: Checkpoint):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise ConfigError(f"checkpoint {path} not found") from None
    return decode_checkpoint(data)


def run_checkpoint(
    model: Module,
    trainer: TrainerState,
    cfg: TrainConfig,
    rng: RandomSource,
    epoch: int,
) -> Checkpoint:
    tensors = model.named_parameters("model.")
    tensors.update(prefixed("trainer.", trainer.tensors()))
    return Checkpoint(tensors, cfg, rng.get_state(), epoch)


def model_tensors(ckpt: Checkpoint, prefix: str) -> Params:
    return {
        name[len(prefix) :]: value
        for name, value in ckpt.tensors.items()
        if name.startswith(prefix)
    }


@dataclass
class Run:
    kind: ModelKind
    cfg: TrainConfig
    model: Module
    trainer: TrainerState
    rng: RandomSource
    epoch: int = 0


def new_run(cfg: TrainConfig, width: int) -> Run:
    kind = get_model_kind(cfg.model)
    model = kind.run("build", cfg, width, RandomSource(cfg.seed, (2,)))
    trainer = kind.run("init_state", model, cfg)
    return Run(kind, cfg, model, trainer, RandomSource(cfg.seed, (3,)))


def restore_run(ckpt: Checkpoint, width: Optional[int] = None) -> Run:
    """Rebuild a run from a checkpoint; ``width`` defaults to the stored
    visible width of the model."""
    if width is None:
        width = _stored_width(ckpt)
    run = new_run(ckpt.config, width)
    run.model.load_parameters(model_tensors(ckpt, "model."))
    run.trainer.restore(model_tensors(ckpt, "trainer."))
    run.rng.set_state(ckpt.rng_state)
    run.epoch = ckpt.epoch
    return run


def _stored_width(ckpt: Checkpoint) -> int:
    params = model_tensors(ckpt, "model.")
    for name in ("W0", "gsn.W0", "level0.gsn.W0", "cell0.Wx"):
        if name in params:
            return params[name].shape[0]
    raise ConfigError("cannot tell the frame width of this checkpoint")


# Training


def train(
    cfg: TrainConfig,
    data: ExperimentData,
    out_dir: Optional[Path] = None,
    resume: Optional[Path] = None,
) -> Tuple[Run, MetricsLog]:
    """Train for ``cfg.epochs`` epochs, checkpointing into ``out_dir``.

    A non-finite training loss stops the run with ``DivergenceError``
    after its row and a checkpoint have been written.
    """
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config.copy(update={"epochs": cfg.epochs}) != cfg:
            raise ConfigError(
                f"{resume} was written by a different configuration"
            )
        run = restore_run(ckpt, data.width)
        run.cfg = cfg
        log.info("resuming %s at epoch %d", cfg.model, run.epoch)
    else:
        run = new_run(cfg, data.width)
    metrics = MetricsLog(out_dir / METRICS_NAME if out_dir else None)
    every = cfg.checkpoint_every or get_settings().checkpoint_every

    def checkpoint():
        if out_dir is not None:
            save_checkpoint(
                out_dir / CHECKPOINT_NAME,
                run_checkpoint(
                    run.model, run.trainer, cfg, run.rng, run.epoch
                ),
            )

    for epoch in range(run.epoch + 1, cfg.epochs + 1):
        values = run.kind.run(
            "train_epoch",
            run.model,
            run.trainer,
            data.train_batches(epoch),
            cfg,
            run.rng,
        )
        run.trainer.end_epoch()
        run.epoch = epoch
        for name, value in values.items():
            metrics.add(epoch, "train", name, value)
        bad = [(n, v) for n, v in values.items() if not math.isfinite(v)]
        if bad:
            log.warning("%s diverged at epoch %d", cfg.model, epoch)
            checkpoint()
            raise DivergenceError(epoch, *bad[0])
        if data.test:
            for name, value in held_out_metrics(run, data).items():
                metrics.add(epoch, "test", name, value)
        log.info(
            "epoch %d: %s",
            epoch,
            ", ".join(f"{n}={v:.6g}" for n, v in sorted(values.items())),
        )
        if epoch % every == 0:
            checkpoint()
    checkpoint()
    return run, metrics


def held_out_metrics(run: Run, data: ExperimentData) -> Dict[str, float]:
    predictor = run.kind.run("predictor", run.model, run.cfg)
    rv = {"mse": evaluate_mse(predictor, data.test)}
    if data.destandardize is not None:
        rv["mse_raw"] = evaluate_mse(
            predictor, data.test, data.destandardize
        )
    return rv


# Evaluation


class CopyLastFrame(Predictor):
    def step(self, x: Matrix) -> Matrix:
        return x


def _groups(
    sequences: Sequence[np.ndarray], batch_size: Optional[int]
) -> List[np.ndarray]:
    """Equal-length sequences stacked into ``(T, B, D)`` batches."""
    by_length: Dict[int, List[np.ndarray]] = {}
    for seq in sequences:
        if len(seq) >= 2:
            by_length.setdefault(len(seq), []).append(np.asarray(seq))
    rv = []
    for group in by_length.values():
        size = batch_size or len(group)
        rv.extend(batch_windows(group, size))
    return rv


def evaluate_mse(
    predictor: Predictor,
    sequences: Sequence[np.ndarray],
    destandardize: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    batch_size: Optional[int] = None,
) -> float:
    """Teacher-forced horizon-1 squared error per element and frame."""
    sse = []
    count = 0
    for batch in _groups(sequences, batch_size):
        predicted, actual = predictor.predict_sequence(batch), batch[1:]
        if destandardize is not None:
            predicted = destandardize(predicted)
            actual = destandardize(actual)
        sse.extend(((predicted - actual) ** 2).sum(axis=(0, 2)))
        count += actual.size
    if not count:
        raise DatasetError("no test sequence with at least two frames")
    return math.fsum(sse) / count


HorizonFn = Callable[[np.ndarray, List[int]], Dict[int, np.ndarray]]


def horizon_predictions(
    kind: ModelKind, model: Module, cfg: TrainConfig
) -> HorizonFn:
    if kind.supports("predict_horizons"):
        return lambda batch, horizons: kind.run(
            "predict_horizons", model, cfg, batch, horizons
        )

    def one_step(batch, horizons):
        if list(horizons) != [1]:
            raise ConfigError(
                f"{kind.name} only predicts one frame ahead, "
                f"got horizons {list(horizons)}"
            )
        predictor = kind.run("predictor", model, cfg)
        return {1: predictor.predict_sequence(batch)}

    return one_step


def evaluate_bce(
    predict: HorizonFn,
    sequences: Sequence[np.ndarray],
    horizons: Sequence[int],
    batch_size: Optional[int] = None,
) -> Dict[int, float]:
    horizons = sorted(set(horizons))
    if not horizons or horizons[0] < 1:
        raise ConfigError(f"horizons must be positive, got {horizons}")
    for seq in sequences:
        if np.size(seq) and (np.min(seq) < 0.0 or np.max(seq) > 1.0):
            raise DatasetError("BCE needs frames in [0, 1]")
    sums = {h: [] for h in horizons}
    counts = dict.fromkeys(horizons, 0)
    for batch in _groups(sequences, batch_size):
        predicted = predict(batch, horizons)
        for h in horizons:
            if h >= len(batch):
                continue
            p = np.clip(predicted[h], BCE_EPSILON, 1.0 - BCE_EPSILON)
            t = batch[h:]
            sums[h].append(
                float(-np.sum(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))
            )
            counts[h] += t.size
    return {
        h: math.fsum(sums[h]) / counts[h] for h in horizons if counts[h]
    }


# Sampling


def sample_frames(
    run: Run, prime: np.ndarray, steps: int, rng: RandomSource
) -> np.ndarray:
    """``(steps, B, D)`` frames generated after seeing ``prime``."""
    if run.kind.supports("sample"):
        frames = run.kind.run("sample", run.model, run.cfg, prime, steps, rng)
    else:
        predictor = run.kind.run("predictor", run.model, run.cfg)
        frames = predictor.rollout(prime, steps)
    if not frames:
        return np.zeros((0,) + prime.shape[1:])
    return np.stack(frames)


# Image grids


def emit_image_grid(
    frames: np.ndarray,
    cols: int,
    path: Path,
    dims: Optional[Tuple[int, int]] = None,
) -> Tuple[int, int]:
    """Tile flattened frames row-major into a binary PGM; returns its
    ``(height, width)``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or not len(frames):
        raise ValueError(f"expected (frames, pixels), got {frames.shape}")
    n, size = frames.shape
    if dims is None:
        side = math.isqrt(size)
        if side * side != size:
            raise ValueError(f"frames of {size} pixels need explicit dims")
        dims = (side, side)
    h, w = dims
    if h * w != size:
        raise ValueError(f"dims {dims} do not cover {size} pixels")
    cols = max(1, min(cols, n))
    rows = math.ceil(n / cols)
    height, width = rows * h + rows - 1, cols * w + cols - 1
    canvas = np.full((height, width), 255, dtype=np.uint8)
    pixels = np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        top, left = r * (h + 1), c * (w + 1)
        canvas[top : top + h, left : left + w] = pixels[i].reshape(h, w)
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(canvas.tobytes())
    return height, width


# Gradient checks


def dense_gradcheck(widths: List[int], seed: int) -> Dict[str, float]:
    rng = RandomSource(seed)
    layer = DenseLayer(widths[0], widths[1], "tanh", rng.split())
    x = rng.normal(0.0, 1.0, (4, widths[0]))
    target = rng.normal(0.0, 0.5, (4, widths[1]))

    def loss_and_grads():
        y, cache = layer.forward(x)
        loss, dy = mse_loss(y, target)
        _, grads = layer.backward(cache, dy)
        return loss, grads

    return {"dense": check_module(layer, loss_and_grads, max_checks=None)}


def lstm_cell_gradcheck(widths: List[int], seed: int) -> Dict[str, float]:
    rng = RandomSource(seed)
    cell = LstmCell(widths[0], widths[1], rng.split())
    x = rng.normal(0.0, 1.0, (3, widths[0]))
    state = (
        np.tanh(rng.normal(0.0, 1.0, (3, widths[1]))),
        rng.normal(0.0, 1.0, (3, widths[1])),
    )
    h_target = rng.normal(0.0, 0.5, (3, widths[1]))
    c_target = rng.normal(0.0, 0.5, (3, widths[1]))

    def loss_and_grads():
        (h, c), cache = cell.step(x, state)
        h_loss, dh = mse_loss(h, h_target)
        c_loss, dc = mse_loss(c, c_target)
        _, _, _, grads = cell.backward(cache, dh, dc)
        return h_loss + c_loss, grads

    return {"lstm_cell": check_module(cell, loss_and_grads, max_checks=None)}


LAYER_CHECKS = {"dense": dense_gradcheck, "lstm_cell": lstm_cell_gradcheck}


def run_gradcheck(
    name: str, widths: List[int], seed: int
) -> Tuple[Dict[str, float], float]:
    """Worst relative errors per checked path, plus the tolerance."""
    if len(widths) < 2:
        raise ConfigError(f"gradcheck needs two or more widths, got {widths}")
    if name in LAYER_CHECKS:
        return LAYER_CHECKS[name](widths, seed), 1e-4
    kind = get_model_kind(name)
    return kind.run("gradcheck", widths, seed), kind.gradcheck_tolerance


# Model comparison


def compare(
    dataset: str,
    models: Sequence[str],
    epochs: int,
    out_dir: Path,
    overrides: Sequence[str] = (),
) -> List[Dict[str, Union[str, float, None]]]:
    """Train each model on the same data and score horizon-1 MSE.

    Writes ``compare.csv`` with one scored row per model, a copy-last-frame
    row and the published reference values.
    """
    presets = set(preset_names())
    rows = []
    data = None
    for name in models:
        preset = f"{dataset}/{name}"
        if preset in presets:
            cfg = resolve_config(preset, [f"epochs={epochs}", *overrides])
        else:
            cfg = resolve_config(
                None,
                [
                    f"model={name}",
                    f"dataset.name={dataset}",
                    f"epochs={epochs}",
                    *overrides,
                ],
            )
        model_dir = out_dir / name
        model_dir.mkdir(parents=True, exist_ok=True)
        (model_dir / CONFIG_NAME).write_text(cfg.echo(), encoding="utf-8")
        data = prepare_data(cfg)
        run, _ = train(cfg, data, model_dir)
        predictor = run.kind.run("predictor", run.model, cfg)
        mse = evaluate_mse(predictor, data.test, data.destandardize)
        log.info("%s on %s: mse %.6g", name, dataset, mse)
        rows.append(_compare_row(name, mse, dataset))
    if data is not None:
        naive = evaluate_mse(CopyLastFrame(), data.test, data.destandardize)
        rows.append(_compare_row("copy_last", naive, dataset))
    for name in REFERENCE_MSE:
        if name not in models:
            rows.append(_compare_row(name, None, dataset))
    with open(out_dir / "compare.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("model", "mse", "reference"))
        for row in rows:
            writer.writerow(
                [
                    row["model"],
                    "" if row["mse"] is None else repr(row["mse"]),
                    "" if row["reference"] is None else row["reference"],
                ]
            )
    return rows


def _compare_row(name: str, mse: Optional[float], dataset: str):
    return {
        "model": name,
        "mse": mse,
        "reference": REFERENCE_MSE.get(name, {}).get(dataset),
    }
