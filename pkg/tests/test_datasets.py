import gzip
import json

import numpy as np
import pytest
from pydantic import ValidationError

from seqgsn.datasets import IMAGE_MAGIC, LABEL_MAGIC, MOCAP_CHANNELS
from seqgsn.datasets import BouncingBallsConfig, LabeledImages
from seqgsn.datasets import SequenceDataset, batch_windows, bouncing_balls
from seqgsn.datasets import container_dataset, find_mnist, load_mocap_csv
from seqgsn.datasets import load_mnist_idx, make_subsequences, read_idx
from seqgsn.datasets import render_frame, sequence_mnist
from seqgsn.datasets import simulate_bouncing_balls, simulate_trajectory
from seqgsn.datasets import split_80_20, synthesize_mocap, toy_stream
from seqgsn.datasets import write_container, write_idx
from seqgsn.errors import DatasetError
from seqgsn.tensor import RandomSource


def _energy(vel):
    return float(np.sum(vel * vel))


def test_trajectory_stays_in_the_box_and_keeps_energy():
    cfg = BouncingBallsConfig(n_balls=3)
    pos, vel = simulate_trajectory(cfg, 10_000, RandomSource(0))
    assert pos.shape == (10_000, 3, 2)
    low, high = cfg.radius, cfg.box_size - cfg.radius
    assert pos.min() >= low - 1e-9
    assert pos.max() <= high + 1e-9
    energies = (vel * vel).sum(axis=(1, 2))
    np.testing.assert_allclose(energies, energies[0], rtol=1e-6)


def test_wall_reflection_keeps_speed():
    cfg = BouncingBallsConfig(n_balls=1)
    pos, vel = simulate_trajectory(
        cfg, 3, positions=[[8.0, 5.0]], velocities=[[1.0, 0.0]]
    )
    np.testing.assert_allclose(vel[2], [[-1.0, 0.0]])
    assert pos[2, 0, 0] < cfg.box_size - cfg.radius
    assert np.linalg.norm(vel[2]) == pytest.approx(1.0, abs=1e-9)


def test_head_on_collision_swaps_velocities():
    cfg = BouncingBallsConfig(n_balls=2)
    start_vel = np.array([[0.5, 0.0], [-0.5, 0.0]])
    pos, vel = simulate_trajectory(
        cfg, 4, positions=[[3.0, 5.0], [7.0, 5.0]], velocities=start_vel
    )
    np.testing.assert_allclose(vel[3], [[-0.5, 0.0], [0.5, 0.0]])
    np.testing.assert_allclose(vel.sum(axis=1), 0.0, atol=1e-12)
    assert _energy(vel[3]) == pytest.approx(_energy(start_vel), rel=1e-9)
    gaps = np.linalg.norm(pos[:, 1] - pos[:, 0], axis=1)
    assert gaps.min() > cfg.radius


def test_balls_need_room():
    with pytest.raises(ValidationError):
        BouncingBallsConfig(radius=5.0, box_size=10.0)
    cfg = BouncingBallsConfig(n_balls=40, radius=2.0)
    with pytest.raises(DatasetError):
        simulate_trajectory(cfg, 1, RandomSource(0))


def test_rendered_frames():
    cfg = BouncingBallsConfig(frames=20)
    video = simulate_bouncing_balls(cfg, RandomSource(1)).sequences[0]
    assert video.shape == (20, cfg.resolution**2)
    assert video.min() >= 0.0 and video.max() <= 1.0
    again = simulate_bouncing_balls(cfg, RandomSource(1)).sequences[0]
    np.testing.assert_array_equal(video, again)

    frame = render_frame(np.array([[5.0, 5.0]]), cfg).reshape(15, 15)
    row, col = np.unravel_index(np.argmax(frame), frame.shape)
    assert (row, col) == (7, 7)


def test_bouncing_balls_videos():
    cfg = BouncingBallsConfig(frames=12, resolution=8)
    ds = bouncing_balls(cfg, 3, RandomSource(0))
    assert len(ds) == 3
    assert ds.width == 64
    assert ds.frame_shape == (8, 8)
    assert not np.array_equal(ds.sequences[0], ds.sequences[1])


def test_idx_files(tmp_path):
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    labels = np.array([4, 7], dtype=np.uint8)
    write_idx(tmp_path / "images", images)
    write_idx(tmp_path / "labels.gz", labels)
    np.testing.assert_array_equal(
        read_idx(tmp_path / "images", IMAGE_MAGIC), images
    )
    store = load_mnist_idx(tmp_path / "images", tmp_path / "labels.gz")
    assert store.shape == (3, 4)
    assert store.images.shape == (2, 12)
    assert store.images[1, -1] == pytest.approx(23 / 255.0)
    np.testing.assert_array_equal(store.labels, [4, 7])


def test_idx_errors(tmp_path):
    write_idx(tmp_path / "labels", np.arange(20, dtype=np.uint8))
    with pytest.raises(DatasetError, match="bad magic"):
        read_idx(tmp_path / "labels", IMAGE_MAGIC)
    data = (tmp_path / "labels").read_bytes()
    (tmp_path / "short").write_bytes(data[:-1])
    with pytest.raises(DatasetError, match="truncated"):
        read_idx(tmp_path / "short", LABEL_MAGIC)
    (tmp_path / "padded").write_bytes(data + b"\x00")
    with pytest.raises(DatasetError, match="bytes after"):
        read_idx(tmp_path / "padded", LABEL_MAGIC)
    with pytest.raises(DatasetError):
        find_mnist(tmp_path)


def test_find_mnist_reads_gzip(tmp_path):
    images = np.zeros((10, 2, 2), dtype=np.uint8)
    with gzip.open(tmp_path / "t10k-images-idx3-ubyte.gz", "wb") as f:
        f.write(IMAGE_MAGIC.to_bytes(4, "big"))
        for dim in images.shape:
            f.write(dim.to_bytes(4, "big"))
        f.write(images.tobytes())
    write_idx(
        tmp_path / "t10k-labels-idx1-ubyte.gz",
        np.arange(10, dtype=np.uint8),
    )
    assert find_mnist(tmp_path, "test").images.shape == (10, 4)


def _store(per_class=3):
    labels = np.repeat(np.arange(10), per_class)
    images = labels[:, np.newaxis] / 10.0 * np.ones((1, 4))
    return LabeledImages(images, labels, (2, 2))


def test_sequenced_mnist_follows_label_order():
    ds = sequence_mnist(_store(), RandomSource(0))
    np.testing.assert_array_equal(ds.labels[0], np.tile(np.arange(10), 3))
    np.testing.assert_allclose(
        ds.sequences[0][:, 0], np.tile(np.arange(10) / 10.0, 3)
    )
    two = sequence_mnist(_store(), RandomSource(0), cycles=2)
    assert len(two.sequences[0]) == 20


def test_sequenced_mnist_needs_every_digit():
    store = _store()
    keep = store.labels != 3
    store = LabeledImages(store.images[keep], store.labels[keep], (2, 2))
    with pytest.raises(DatasetError):
        sequence_mnist(store, RandomSource(0))


def test_mocap_csv(tmp_path):
    rows = np.arange(10 * MOCAP_CHANNELS, dtype=np.float64).reshape(10, -1)
    path = tmp_path / "walk.csv"
    path.write_text(
        "\n".join(",".join(repr(v) for v in row) for row in rows) + "\n"
    )
    ds = load_mocap_csv(path)
    assert ds.value_range == "unbounded"
    assert ds.width == MOCAP_CHANNELS
    np.testing.assert_allclose(ds.mean, rows[:8].mean(axis=0))
    standardized = ds.standardized().sequences[0]
    np.testing.assert_allclose(standardized[:8].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(ds.destandardize(standardized), rows)


def test_mocap_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,2,3\n")
    with pytest.raises(DatasetError, match="columns"):
        load_mocap_csv(path)
    path.write_text(",".join(["x"] * MOCAP_CHANNELS) + "\n")
    with pytest.raises(DatasetError, match="non-numeric"):
        load_mocap_csv(path)


def test_synthetic_mocap():
    ds = synthesize_mocap(RandomSource(0), frames=200)
    assert ds.sequences[0].shape == (200, MOCAP_CHANNELS)
    assert ds.std.min() > 0.0


@pytest.mark.parametrize(
    "frames, train, test", [(10, 8, 2), (3826, 3060, 766), (5, 4, 1)]
)
def test_split_80_20(frames, train, test):
    ds = SequenceDataset([np.zeros((frames, 2))])
    first, second = split_80_20(ds)
    assert len(first.sequences[0]) == train
    assert len(second.sequences[0]) == test
    assert (first.split, second.split) == ("train", "test")


def test_split_needs_five_frames():
    with pytest.raises(DatasetError):
        split_80_20(SequenceDataset([np.zeros((4, 2))]))


def test_subsequences():
    ds = SequenceDataset([np.zeros((128, 3))])
    assert len(make_subsequences(ds, 100)) == 1
    windows = make_subsequences(ds, 32)
    assert len(windows) == 4
    assert len(make_subsequences(ds, 32, stride=16)) == 7
    batches = batch_windows(windows, 3)
    assert [b.shape for b in batches] == [(32, 3, 3), (32, 1, 3)]
    with pytest.raises(ValueError):
        make_subsequences(ds, 1)


def test_dataset_checks():
    with pytest.raises(DatasetError):
        SequenceDataset([np.zeros((3, 2)), np.zeros((3, 4))])
    with pytest.raises(DatasetError):
        SequenceDataset([np.full((3, 2), 2.0)])
    SequenceDataset([np.full((3, 2), 2.0)], value_range="unbounded")


def test_toy_streams():
    alternate = toy_stream("alternate", 4, 6).sequences[0]
    np.testing.assert_array_equal(alternate[0], [1, 1, 0, 0])
    np.testing.assert_array_equal(alternate[1], [0, 0, 1, 1])
    constant = toy_stream("constant", 4, 6).sequences[0]
    assert (constant == constant[0]).all()
    blobs = toy_stream("blobs", 16, 10, RandomSource(0)).sequences[0]
    assert blobs.shape == (10, 16)
    with pytest.raises(DatasetError):
        toy_stream("blobs", 10, 4)
    with pytest.raises(DatasetError):
        toy_stream("spiral")


def test_video_container(tmp_path):
    videos = np.full((2, 3, 6), 0.25)
    videos[1] = 0.75
    path = tmp_path / "clips.videos"
    write_container(path, videos, 2, 3)
    header = json.loads(path.read_bytes().split(b"\n", 1)[0])
    assert header["n_sequences"] == 2
    ds = container_dataset(path)
    assert ds.value_range == "unit_interval"
    assert ds.frame_shape == (2, 3)
    np.testing.assert_array_equal(ds.sequences[1], videos[1])

    write_container(path, videos * 4.0, 2, 3)
    assert container_dataset(path).value_range == "unbounded"
    with pytest.raises(DatasetError):
        write_container(path, videos, 2, 2)
    path.write_bytes(b"not json\n")
    with pytest.raises(DatasetError):
        container_dataset(path)
