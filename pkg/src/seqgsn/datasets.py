"""Sequenced MNIST, bouncing-ball videos, motion capture and toy streams.

Every dataset is a ``SequenceDataset``: a list of ``(T, D)`` float64
frame matrices sharing the frame width ``D``. Training code cuts them into
fixed-length windows and stacks the windows into ``(T, B, D)`` batches.
"""

import csv
import gzip
import json
import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, PositiveFloat, confloat, conint
from pydantic import root_validator

from .errors import DatasetError
from .tensor import RandomSource

log = logging.getLogger(__name__)

ValueRange = Literal["unit_interval", "unbounded"]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MOCAP_CHANNELS = 49
CONTAINER_VERSION = 1
PLACEMENT_TRIES = 100


@dataclass
class SequenceDataset:
    sequences: List[np.ndarray]
    value_range: ValueRange = "unit_interval"
    split: str = "all"
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    labels: Optional[List[np.ndarray]] = None
    frame_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.sequences = [
            np.asarray(s, dtype=np.float64) for s in self.sequences
        ]
        widths = {s.shape[1] for s in self.sequences if s.ndim == 2}
        if any(s.ndim != 2 for s in self.sequences) or len(widths) > 1:
            raise DatasetError(
                "sequences must be (frames, width) with one shared width"
            )
        if self.value_range == "unit_interval":
            for s in self.sequences:
                if s.size and (s.min() < 0.0 or s.max() > 1.0):
                    raise DatasetError("unit_interval frame outside [0, 1]")

    @property
    def width(self) -> int:
        return self.sequences[0].shape[1]

    def __len__(self):
        return len(self.sequences)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return x
        return (x - self.mean) / self.std

    def destandardize(self, x: np.ndarray) -> np.ndarray:
        if self.mean is None:
            return x
        return x * self.std + self.mean

    def standardized(self) -> "SequenceDataset":
        return replace(
            self,
            sequences=[self.standardize(s) for s in self.sequences],
        )


# Bouncing balls


class BouncingBallsConfig(BaseModel):
    n_balls: conint(ge=1) = 3
    resolution: conint(ge=4) = 15
    frames: conint(ge=1) = 128
    box_size: PositiveFloat = 10.0
    radius: PositiveFloat = 1.2
    speed_scale: confloat(ge=0.0) = 0.5
    seed: int = 0

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def _fits(cls, values):
        if values["radius"] >= values["box_size"] / 2:
            raise ValueError("ball radius must be below half the box size")
        return values


def _place_balls(cfg: BouncingBallsConfig, rng: RandomSource) -> np.ndarray:
    low, high = cfg.radius, cfg.box_size - cfg.radius
    for _ in range(PLACEMENT_TRIES):
        positions = low + rng.uniform((cfg.n_balls, 2)) * (high - low)
        gaps = [
            np.linalg.norm(positions[i] - positions[j])
            for i in range(cfg.n_balls)
            for j in range(i + 1, cfg.n_balls)
        ]
        if all(gap >= 2 * cfg.radius for gap in gaps):
            return positions
    raise DatasetError(
        f"could not place {cfg.n_balls} balls of radius {cfg.radius} "
        f"without overlap in {PLACEMENT_TRIES} tries"
    )


def _initial_velocities(cfg, rng: RandomSource) -> np.ndarray:
    speed = (0.5 + rng.uniform(cfg.n_balls)) * cfg.speed_scale
    angle = rng.uniform(cfg.n_balls) * 2.0 * math.pi
    return np.stack([speed * np.cos(angle), speed * np.sin(angle)], axis=1)


def _reflect_walls(pos, vel, low, high):
    for axis in range(2):
        over = pos[:, axis] > high
        pos[over, axis] = 2.0 * high - pos[over, axis]
        vel[over, axis] = -vel[over, axis]
        under = pos[:, axis] < low
        pos[under, axis] = 2.0 * low - pos[under, axis]
        vel[under, axis] = -vel[under, axis]


def _collide(pos, vel, radius):
    n = pos.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            delta = pos[j] - pos[i]
            dist = math.hypot(delta[0], delta[1])
            if dist == 0.0 or dist >= 2.0 * radius:
                continue
            normal = delta / dist
            closing = float(np.dot(vel[i] - vel[j], normal))
            if closing > 0.0:
                vel[i] -= closing * normal
                vel[j] += closing * normal


def simulate_trajectory(
    cfg: BouncingBallsConfig,
    steps: int,
    rng: Optional[RandomSource] = None,
    positions: Optional[np.ndarray] = None,
    velocities: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Ball centers and velocities at ``steps`` frames, the first initial.

    One frame advances time by 1. It is split into equal sub-steps short
    enough that no ball moves more than a quarter radius per sub-step.
    """
    rng = rng if rng is not None else RandomSource(cfg.seed)
    pos = (
        _place_balls(cfg, rng)
        if positions is None
        else np.array(positions, dtype=np.float64)
    )
    vel = (
        _initial_velocities(cfg, rng)
        if velocities is None
        else np.array(velocities, dtype=np.float64)
    )
    # equal masses: no ball can ever be faster than the total energy allows
    top_speed = math.sqrt(float(np.sum(vel * vel)))
    substeps = int(top_speed / (cfg.radius / 4.0)) + 1
    dt = 1.0 / substeps
    low, high = cfg.radius, cfg.box_size - cfg.radius
    all_pos = np.empty((steps, cfg.n_balls, 2))
    all_vel = np.empty((steps, cfg.n_balls, 2))
    for t in range(steps):
        all_pos[t] = pos
        all_vel[t] = vel
        for _ in range(substeps):
            pos += vel * dt
            _reflect_walls(pos, vel, low, high)
            _collide(pos, vel, cfg.radius)
    return all_pos, all_vel


def render_frame(positions: np.ndarray, cfg: BouncingBallsConfig):
    """Sum of Gaussian blobs, one per ball, clamped to [0, 1]."""
    res = cfg.resolution
    centers = (np.arange(res) + 0.5) * (cfg.box_size / res)
    xs, ys = np.meshgrid(centers, centers)
    sigma = cfg.radius / 2.0
    frame = np.zeros((res, res))
    for x, y in positions:
        d2 = (xs - x) ** 2 + (ys - y) ** 2
        frame += np.exp(-d2 / (2.0 * sigma * sigma))
    return np.clip(frame, 0.0, 1.0).reshape(-1)


def simulate_bouncing_balls(
    cfg: BouncingBallsConfig, rng: Optional[RandomSource] = None
) -> SequenceDataset:
    positions, _ = simulate_trajectory(cfg, cfg.frames, rng)
    frames = np.stack([render_frame(p, cfg) for p in positions])
    return SequenceDataset(
        [frames], frame_shape=(cfg.resolution, cfg.resolution)
    )


def bouncing_balls(
    cfg: BouncingBallsConfig, count: int, rng: RandomSource
) -> SequenceDataset:
    videos = [
        simulate_bouncing_balls(cfg, rng.split()).sequences[0]
        for _ in range(count)
    ]
    return SequenceDataset(
        videos, frame_shape=(cfg.resolution, cfg.resolution)
    )


# MNIST


@dataclass
class LabeledImages:
    images: np.ndarray
    labels: np.ndarray
    shape: Tuple[int, int]

    def by_class(self) -> Dict[int, np.ndarray]:
        return {
            int(label): np.flatnonzero(self.labels == label)
            for label in np.unique(self.labels)
        }


def _open(path: Path, mode="rb"):
    if Path(path).suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_idx(path: Path, magic: int) -> np.ndarray:
    ndim = 3 if magic == IMAGE_MAGIC else 1
    with _open(path) as f:
        header = f.read(4 + 4 * ndim)
        if len(header) < 4 + 4 * ndim:
            raise DatasetError(f"{path}: truncated IDX header")
        observed, *dims = struct.unpack(f">{1 + ndim}i", header)
        if observed != magic:
            raise DatasetError(
                f"{path}: bad magic {observed:#010x}, expected {magic:#010x}"
            )
        payload = f.read()
    need = int(np.prod(dims))
    if len(payload) < need:
        raise DatasetError(
            f"{path}: truncated payload, {len(payload)} of {need} bytes"
        )
    if len(payload) > need:
        raise DatasetError(
            f"{path}: {len(payload) - need} bytes after the {need} byte "
            "payload"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path: Path, array: np.ndarray):
    array = np.asarray(array, dtype=np.uint8)
    magic = IMAGE_MAGIC if array.ndim == 3 else LABEL_MAGIC
    with _open(path, "wb") as f:
        f.write(struct.pack(f">{1 + array.ndim}i", magic, *array.shape))
        f.write(array.tobytes())


def load_mnist_idx(images_path: Path, labels_path: Path) -> LabeledImages:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    count, rows, cols = images.shape
    return LabeledImages(
        images.reshape(count, rows * cols).astype(np.float64) / 255.0,
        labels.astype(np.int64),
        (rows, cols),
    )


def find_mnist(directory: Path, split: str = "train") -> LabeledImages:
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        images = directory / f"{prefix}-images-idx3-ubyte{suffix}"
        labels = directory / f"{prefix}-labels-idx1-ubyte{suffix}"
        if images.is_file() and labels.is_file():
            return load_mnist_idx(images, labels)
    raise DatasetError(f"no {prefix} MNIST IDX files in {directory}")


def sequence_mnist(
    store: LabeledImages, rng: RandomSource, cycles: Optional[int] = None
) -> SequenceDataset:
    """Digits in label order 0..9 repeated, a fresh draw per position."""
    classes = store.by_class()
    missing = [d for d in range(10) if len(classes.get(d, ())) == 0]
    if missing:
        raise DatasetError(f"MNIST store lacks digit classes {missing}")
    if cycles is None:
        cycles = min(len(classes[d]) for d in range(10))
    picks = [
        classes[d][int(rng.integers(0, len(classes[d])))]
        for _ in range(cycles)
        for d in range(10)
    ]
    return SequenceDataset(
        [store.images[picks]],
        labels=[store.labels[picks]],
        frame_shape=store.shape,
    )


# Motion capture


def with_train_stats(ds: SequenceDataset) -> SequenceDataset:
    """Attach per-channel mean/std computed on the training prefixes."""
    train = np.concatenate(
        [s[: int(math.floor(0.8 * len(s)))] for s in ds.sequences]
    )
    std = train.std(axis=0)
    std[std == 0.0] = 1.0
    return replace(ds, mean=train.mean(axis=0), std=std)


def load_mocap_csv(*paths: Path) -> SequenceDataset:
    sequences = []
    for path in paths:
        rows = []
        with open(path, newline="") as f:
            for index, row in enumerate(csv.reader(f), 1):
                if not row:
                    continue
                if len(row) != MOCAP_CHANNELS:
                    raise DatasetError(
                        f"{path}: row {index} has {len(row)} columns, "
                        f"expected {MOCAP_CHANNELS}"
                    )
                try:
                    rows.append([float(cell) for cell in row])
                except ValueError:
                    raise DatasetError(
                        f"{path}: row {index} has a non-numeric cell"
                    ) from None
        if not rows:
            raise DatasetError(f"{path}: no mocap rows")
        sequences.append(np.array(rows))
    return with_train_stats(
        SequenceDataset(sequences, value_range="unbounded")
    )


def synthesize_mocap(
    rng: RandomSource, frames: int = 3826, components: int = 3
) -> SequenceDataset:
    """Stand-in mocap: each channel a mixture of slow sinusoids."""
    t = np.arange(frames, dtype=np.float64)[:, np.newaxis]
    shape = (components, MOCAP_CHANNELS)
    freq = 0.005 + 0.05 * rng.uniform(shape)
    phase = 2.0 * math.pi * rng.uniform(shape)
    amp = 10.0 * rng.uniform(shape)
    offset = rng.normal(0.0, 20.0, (1, MOCAP_CHANNELS))
    data = offset + sum(
        amp[i] * np.sin(2.0 * math.pi * freq[i] * t + phase[i])
        for i in range(components)
    )
    data = data + rng.normal(0.0, 0.1, data.shape)
    return with_train_stats(SequenceDataset([data], value_range="unbounded"))


# Splits and batching


def split_80_20(
    ds: SequenceDataset,
) -> Tuple[SequenceDataset, SequenceDataset]:
    train, test, train_labels, test_labels = [], [], [], []
    for i, seq in enumerate(ds.sequences):
        if len(seq) < 5:
            raise DatasetError(
                f"sequence {i} has {len(seq)} frames, need at least 5"
            )
        cut = int(math.floor(0.8 * len(seq)))
        train.append(seq[:cut])
        test.append(seq[cut:])
        if ds.labels is not None:
            train_labels.append(ds.labels[i][:cut])
            test_labels.append(ds.labels[i][cut:])
    labels = ds.labels is not None
    return (
        replace(
            ds,
            sequences=train,
            split="train",
            labels=train_labels if labels else None,
        ),
        replace(
            ds,
            sequences=test,
            split="test",
            labels=test_labels if labels else None,
        ),
    )


def make_subsequences(
    ds: SequenceDataset,
    length: int,
    stride: Optional[int] = None,
    rng: Optional[RandomSource] = None,
) -> List[np.ndarray]:
    """Contiguous windows; a short tail window is dropped.

    With ``rng`` the window order is shuffled, otherwise it follows the
    sequences.
    """
    if length < 2:
        raise ValueError(f"subsequence length {length} below 2")
    stride = length if stride is None else stride
    if stride < 1:
        raise ValueError(f"stride {stride} below 1")
    windows = [
        seq[start : start + length]
        for seq in ds.sequences
        for start in range(0, len(seq) - length + 1, stride)
    ]
    if rng is not None:
        windows = [windows[i] for i in rng.permutation(len(windows))]
    return windows


def batch_windows(
    windows: Sequence[np.ndarray], batch_size: int
) -> List[np.ndarray]:
    """Stack equal-length windows into ``(T, B, D)`` batches."""
    return [
        np.stack(windows[i : i + batch_size], axis=1)
        for i in range(0, len(windows), batch_size)
    ]


# Toy streams


def toy_stream(
    pattern: str,
    width: int = 8,
    frames: int = 64,
    rng: Optional[RandomSource] = None,
) -> SequenceDataset:
    base = (np.arange(width) < (width + 1) // 2).astype(np.float64)
    if pattern == "constant":
        data = np.tile(base, (frames, 1))
    elif pattern == "alternate":
        data = np.stack(
            [base if t % 2 == 0 else 1.0 - base for t in range(frames)]
        )
    elif pattern == "blobs":
        side = int(round(math.sqrt(width)))
        if side * side != width:
            raise DatasetError(
                f"blob frames need a square width, got {width}"
            )
        rng = rng if rng is not None else RandomSource(0)
        grid = np.arange(side) + 0.5
        xs, ys = np.meshgrid(grid, grid)
        centers = rng.uniform((frames, 2)) * side
        data = np.stack(
            [
                (
                    np.exp(
                        -((xs - cx) ** 2 + (ys - cy) ** 2) / (side / 4.0) ** 2
                    )
                    > 0.5
                )
                .astype(np.float64)
                .reshape(-1)
                for cx, cy in centers
            ]
        )
    else:
        raise DatasetError(f"unknown toy pattern {pattern!r}")
    return SequenceDataset([data])


# Video container


def write_container(
    path: Path, sequences: Sequence[np.ndarray], height: int, width: int
):
    """JSON header line then float32 little-endian frames, frame-major."""
    data = np.asarray(sequences, dtype="<f4")
    if data.ndim != 3 or data.shape[2] != height * width:
        raise DatasetError(
            f"cannot store shape {data.shape} as {height}x{width} frames"
        )
    header = {
        "version": CONTAINER_VERSION,
        "n_sequences": data.shape[0],
        "frames": data.shape[1],
        "height": height,
        "width": width,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(data.tobytes())


def read_container(path: Path) -> Tuple[np.ndarray, Dict[str, int]]:
    with open(path, "rb") as f:
        line = f.readline()
        payload = f.read()
    try:
        header = json.loads(line)
        shape = (
            header["n_sequences"],
            header["frames"],
            header["height"] * header["width"],
        )
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"{path}: bad container header: {e}") from e
    if header.get("version") != CONTAINER_VERSION:
        raise DatasetError(
            f"{path}: container version {header.get('version')}"
        )
    if len(payload) != 4 * int(np.prod(shape)):
        raise DatasetError(f"{path}: payload does not match header")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return data.astype(np.float64), header


def container_dataset(path: Path) -> SequenceDataset:
    data, header = read_container(path)
    in_range = bool(data.size) and data.min() >= 0.0 and data.max() <= 1.0
    return SequenceDataset(
        list(data),
        value_range="unit_interval" if in_range else "unbounded",
        frame_shape=(header["height"], header["width"]),
    )
