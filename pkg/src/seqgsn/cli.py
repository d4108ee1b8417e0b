import csv
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Sequence

import click
import numpy as np
import typer
from pydantic import BaseModel, Field, ValidationError, conint

from . import harness
from .config import get_settings
from .datasets import BouncingBallsConfig, bouncing_balls, container_dataset
from .datasets import synthesize_mocap, toy_stream, write_container
from .errors import CheckpointError, ConfigError, DatasetError
from .errors import DivergenceError, SeqGsnError
from .experiment import resolve_config
from .models.base import get_model_kinds
from .tensor import RandomSource

log = logging.getLogger(__name__)

app = typer.Typer(add_completion=False)
settings = get_settings()

EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
DATASET_NAMES = ("balls", "mocap", "mnist", "toy")


def _fail(message: str, hint: Optional[str], code: int):
    typer.secho(f"Error: {message}", err=True, fg="red")
    if hint:
        typer.secho(hint, err=True, fg="bright_black")
    raise typer.Exit(code)


@contextmanager
def reported():
    try:
        yield
    except (ConfigError, DatasetError, CheckpointError) as e:
        _fail(
            str(e),
            "Check the config, dataset and checkpoint paths.",
            EXIT_CONFIG,
        )
    except ValidationError as e:
        _fail(str(e), None, EXIT_CONFIG)
    except DivergenceError as e:
        _fail(
            str(e),
            "Metrics and the last checkpoint were kept; try a lower "
            "learning rate or gradient clipping.",
            EXIT_RUNTIME,
        )
    except SeqGsnError as e:
        _fail(str(e), None, EXIT_RUNTIME)


def _int_list(text: str, what: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise typer.BadParameter(f"{what} must be comma-separated integers")


def _out_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


class GenDataRequest(BaseModel):
    dataset: str
    seed: int
    count: conint(ge=1)
    balls: BouncingBallsConfig = Field(default_factory=BouncingBallsConfig)

    class Config:
        extra = "forbid"


@app.callback()
def configure():
    """Sequence prediction with generative stochastic networks."""
    logging.basicConfig(
        level=settings.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@app.command()
def gen_data(
    dataset: str = typer.Option(..., help="balls, mocap or toy"),
    out: Path = typer.Option(..., help="Output directory."),
    seed: int = 0,
    count: int = typer.Option(100, help="Number of sequences."),
):
    """Generate a synthetic dataset file."""
    with reported():
        request = GenDataRequest(
            dataset=dataset,
            seed=seed,
            count=count,
            balls=BouncingBallsConfig(seed=seed),
        )
        out = _out_dir(out)
        (out / "gen-data.json").write_text(
            request.json(indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        rng = RandomSource(seed)
        if dataset == "balls":
            ds = bouncing_balls(request.balls, count, rng)
            side = request.balls.resolution
            path = out / "balls.videos"
            write_container(path, ds.sequences, side, side)
        elif dataset == "toy":
            sequences = [
                toy_stream("blobs", 16, 64, rng.split()).sequences[0]
                for _ in range(count)
            ]
            path = out / "toy.videos"
            write_container(path, sequences, 4, 4)
        elif dataset == "mocap":
            ds = synthesize_mocap(rng)
            path = out / "mocap.csv"
            with open(path, "w", newline="") as f:
                csv.writer(f).writerows(
                    [repr(float(v)) for v in row] for row in ds.sequences[0]
                )
        elif dataset == "mnist":
            raise ConfigError(
                "MNIST is read from IDX files, set dataset.path instead"
            )
        else:
            raise ConfigError(f"unknown dataset {dataset!r}")
        typer.echo(str(path))


@app.command()
def train(
    config: Optional[str] = typer.Option(
        None, help="JSON config file or shipped preset name."
    ),
    override: Optional[List[str]] = typer.Option(
        None, help="Dotted key=value applied after the config."
    ),
    out: Path = typer.Option(Path("run"), help="Output directory."),
    resume: Optional[Path] = typer.Option(
        None, help="Checkpoint to continue from."
    ),
):
    """Train a model and write metrics plus checkpoints."""
    with reported():
        cfg = resolve_config(config, override or [])
        out = _out_dir(out)
        (out / harness.CONFIG_NAME).write_text(cfg.echo(), encoding="utf-8")
        data = harness.prepare_data(cfg)
        run, metrics = harness.train(cfg, data, out, resume)
        for epoch, split, metric, value in metrics.rows:
            if epoch == run.epoch:
                typer.echo(f"{split} {metric} {value:.6g}")


def _prime(test: Sequence[np.ndarray], max_rows: int = 5) -> np.ndarray:
    length = len(test[0])
    rows = [seq for seq in test if len(seq) == length][:max_rows]
    return np.stack([seq[: min(10, length)] for seq in rows], axis=1)


def _grid_dims(frame_shape, width: int):
    if frame_shape is not None:
        return tuple(frame_shape)
    side = int(np.sqrt(width))
    return (side, side) if side * side == width else (1, width)


@app.command()
def sample(
    checkpoint: Path = typer.Option(...),
    steps: int = typer.Option(20, min=0),
    out: Path = typer.Option(Path("samples")),
):
    """Generate frames from a trained model after priming it."""
    with reported():
        ckpt = harness.load_checkpoint(checkpoint)
        run = harness.restore_run(ckpt)
        cfg = run.cfg
        out = _out_dir(out)
        (out / harness.CONFIG_NAME).write_text(cfg.echo(), encoding="utf-8")
        data = harness.prepare_data(cfg)
        prime = _prime(data.test)
        frames = harness.sample_frames(
            run, prime, steps, RandomSource(cfg.seed, (5,))
        )
        if data.destandardize is not None:
            frames = data.destandardize(frames)
        videos = np.transpose(frames, (1, 0, 2))
        height, width = _grid_dims(data.frame_shape, data.width)
        write_container(out / "samples.videos", videos, height, width)
        if steps and data.value_range == "unit_interval":
            harness.emit_image_grid(
                videos.reshape(-1, data.width),
                steps,
                out / "samples.pgm",
                (height, width),
            )
        typer.echo(str(out))


@app.command(name="eval")
def evaluate(
    checkpoint: Path = typer.Option(...),
    dataset: Optional[str] = typer.Option(
        None, help="Dataset name or video container; default held-out."
    ),
    metric: str = typer.Option("mse", help="mse or bce"),
    horizons: str = typer.Option("1", help="Comma-separated, for bce."),
):
    """Score a checkpoint on held-out sequences."""
    with reported():
        ckpt = harness.load_checkpoint(checkpoint)
        run = harness.restore_run(ckpt)
        cfg = run.cfg
        destandardize = None
        if dataset is not None and dataset not in DATASET_NAMES:
            test = container_dataset(Path(dataset)).sequences
        else:
            if dataset is not None:
                cfg = cfg.copy(
                    update={
                        "dataset": cfg.dataset.copy(update={"name": dataset})
                    }
                )
            data = harness.prepare_data(cfg)
            test, destandardize = data.test, data.destandardize
        if metric == "mse":
            predictor = run.kind.run("predictor", run.model, run.cfg)
            typer.echo(f"mse 1 {harness.evaluate_mse(predictor, test):.6g}")
            if destandardize is not None:
                raw = harness.evaluate_mse(predictor, test, destandardize)
                typer.echo(f"mse_raw 1 {raw:.6g}")
        elif metric == "bce":
            scores = harness.evaluate_bce(
                harness.horizon_predictions(run.kind, run.model, run.cfg),
                test,
                _int_list(horizons, "horizons"),
            )
            for h, value in scores.items():
                typer.echo(f"bce {h} {value:.6g}")
        else:
            raise ConfigError(f"unknown metric {metric!r}")


@app.command()
def gradcheck(
    model: str = typer.Option(
        ..., help="Model kind, dense, lstm_cell or all."
    ),
    widths: str = typer.Option("4,3,3", help="Visible then hidden widths."),
    seed: int = 0,
):
    """Compare analytic gradients with central differences."""
    with reported():
        sizes = _int_list(widths, "widths")
        names = [model]
        if model == "all":
            names = list(harness.LAYER_CHECKS) + sorted(get_model_kinds())
        failed = []
        for name in names:
            check_sizes = sizes[:2] if name == "dae" else sizes
            errors, tolerance = harness.run_gradcheck(name, check_sizes, seed)
            for path, error in sorted(errors.items()):
                ok = error <= tolerance
                typer.echo(
                    f"{name} {path} {error:.3e} "
                    f"{'ok' if ok else 'FAILED'} (tolerance {tolerance:g})"
                )
                if not ok:
                    failed.append(f"{name}/{path}")
        if failed:
            _fail(
                f"gradient check failed for {', '.join(failed)}",
                None,
                EXIT_RUNTIME,
            )


@app.command()
def compare(
    dataset: str = typer.Option("balls"),
    models: str = typer.Option("lstm,untied_gsn"),
    epochs: int = typer.Option(20, min=0),
    out: Path = typer.Option(Path("compare")),
    override: Optional[List[str]] = typer.Option(None),
):
    """Train several models on one dataset and tabulate their MSE."""
    with reported():
        names = [name.strip() for name in models.split(",") if name.strip()]
        out = _out_dir(out)
        (out / "compare.json").write_text(
            json.dumps(
                {
                    "dataset": dataset,
                    "models": names,
                    "epochs": epochs,
                    "override": list(override or []),
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
        rows = harness.compare(dataset, names, epochs, out, override or [])
        for row in rows:
            if row["mse"] is not None:
                typer.echo(f"{row['model']} {row['mse']:.6g}")


def run(argv: Sequence[str]) -> int:
    """Run one command line and return its exit status."""
    try:
        rv = app(
            args=list(argv), prog_name="seqgsn", standalone_mode=False
        )
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        return EXIT_USAGE
    return rv if isinstance(rv, int) else 0


def main():
    raise SystemExit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
