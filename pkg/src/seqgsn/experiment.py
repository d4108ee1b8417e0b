"""Experiment configuration, shipped presets and config resolution.

A config file is JSON. The optional ``preset`` key names a shipped preset
(``balls/tgsn``) or another JSON file to inherit from; the file's own keys
are deep-merged over it. Command-line overrides are dotted ``key=value``
pairs applied last.
"""

import json
import logging
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

from pydantic import BaseModel, Field, ValidationError, conint, confloat
from pydantic import root_validator

from .datasets import BouncingBallsConfig
from .errors import ConfigError
from .gsn import WalkbackConfig
from .nn import GradClipConfig, OptimizerConfig
from .tensor import Activation, NoiseConfig

log = logging.getLogger(__name__)

ModelName = Literal[
    "dae", "gsn", "tgsn", "untied_gsn", "rnn_gsn", "sen", "lstm"
]

ALIASES = {
    "walkbacks": "walkback.k",
    "lr": "optimizer.learning_rate",
    "window": "context_window",
}


class DatasetRef(BaseModel):
    name: Literal["balls", "mocap", "mnist", "toy"] = "balls"
    path: Optional[Path] = None
    videos_per_epoch: Optional[conint(ge=1)] = None
    test_videos: Optional[conint(ge=1)] = None
    balls: BouncingBallsConfig = Field(default_factory=BouncingBallsConfig)
    pattern: Literal["constant", "alternate", "blobs"] = "alternate"
    width: conint(ge=1) = 8
    frames: conint(ge=5) = 64

    class Config:
        extra = "forbid"


class TrainConfig(BaseModel):
    model: ModelName
    layer_sizes: List[conint(ge=1)] = [100, 100]
    tied: bool = True
    hidden_activation: Activation = "tanh"
    visible_activation: Optional[Activation] = None
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    walkback: WalkbackConfig = Field(default_factory=WalkbackConfig)
    context_window: conint(ge=1) = 1
    lstm_size: conint(ge=1) = 100
    taps: Optional[List[conint(ge=1)]] = None
    sen_levels: conint(ge=1) = 2
    sequential_walkbacks: conint(ge=0) = 0
    warmup_threshold: confloat(ge=0.0) = 0.01
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    clip: Optional[GradClipConfig] = None
    epochs: conint(ge=0) = 20
    batch_size: conint(ge=1) = 100
    subsequence_length: conint(ge=2) = 100
    seed: int = 0
    dataset: DatasetRef = Field(default_factory=DatasetRef)
    checkpoint_every: Optional[conint(ge=1)] = None

    class Config:
        extra = "forbid"

    @root_validator(skip_on_failure=True)
    def _consistent(cls, values):
        model = values["model"]
        sizes = values["layer_sizes"]
        if not sizes:
            raise ValueError("layer_sizes must name at least one layer")
        if model == "dae" and (len(sizes) != 1 or not values["tied"]):
            raise ValueError("dae needs exactly one tied hidden layer")
        if model == "untied_gsn" and values["walkback"].k < 2 * len(sizes):
            raise ValueError(
                f"untied_gsn needs walkback.k >= {2 * len(sizes)} "
                f"for {len(sizes)} hidden layers"
            )
        taps = values["taps"]
        if taps is not None:
            if model not in ("rnn_gsn", "sen"):
                raise ValueError(f"taps do not apply to {model}")
            if len(set(taps)) != len(taps) or max(taps) > len(sizes):
                raise ValueError(
                    f"taps {taps} must be distinct hidden layers "
                    f"1..{len(sizes)}"
                )
        return values

    @property
    def visible(self) -> Activation:
        if self.visible_activation is not None:
            return self.visible_activation
        return "identity" if self.dataset.name == "mocap" else "sigmoid"

    def echo(self) -> str:
        return self.json(indent=2, sort_keys=True) + "\n"


def preset_names() -> List[str]:
    root = resources.files(__package__).joinpath("presets")
    rv = []

    def walk(node, prefix):
        for child in node.iterdir():
            if child.is_dir():
                walk(child, f"{prefix}{child.name}/")
            elif child.name.endswith(".json"):
                rv.append(prefix + child.name[: -len(".json")])

    walk(root, "")
    return sorted(rv)


def _preset_text(name: str) -> str:
    node = resources.files(__package__).joinpath("presets")
    parts = name.split("/")
    for part in parts[:-1]:
        node = node.joinpath(part)
    node = node.joinpath(parts[-1] + ".json")
    if not node.is_file():
        raise ConfigError(f"unknown preset {name!r}")
    return node.read_text(encoding="utf-8")


def deep_merge(base: Dict[str, Any], top: Dict[str, Any]) -> Dict[str, Any]:
    rv = dict(base)
    for key, value in top.items():
        if isinstance(value, dict) and isinstance(rv.get(key), dict):
            rv[key] = deep_merge(rv[key], value)
        else:
            rv[key] = value
    return rv


def load_raw(source: Union[str, Path], seen=()) -> Dict[str, Any]:
    source = str(source)
    if source in seen:
        raise ConfigError(f"preset cycle through {source!r}")
    path = Path(source)
    if path.suffix == ".json" or path.exists():
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        text = path.read_text(encoding="utf-8")
    else:
        text = _preset_text(source)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a JSON object")
    parent = data.pop("preset", None)
    if parent is not None:
        data = deep_merge(load_raw(parent, seen + (source,)), data)
    return data


def apply_override(data: Dict[str, Any], override: str):
    key, sep, raw = override.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {override!r} is not key=value")
    key = ALIASES.get(key, key)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    *parents, leaf = key.split(".")
    node = data
    for part in parents:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {key!r}: {part!r} is not a section")
        node = child
    node[leaf] = value


def resolve_config(
    source: Union[str, Path, None], overrides: Sequence[str] = ()
) -> TrainConfig:
    data = load_raw(source) if source is not None else {}
    for override in overrides:
        apply_override(data, override)
    try:
        rv = TrainConfig.parse_obj(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
    log.debug("resolved %s config from %s", rv.model, source)
    return rv
