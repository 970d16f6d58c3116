"""Run configuration: one JSON-serializable object covering every command.

A config comes from three layers merged in order: dataclass defaults, then a
JSON file, then explicit command-line flags. Flags always win. parse -> to_json
-> parse is the identity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import WorldSpec
from .errors import ValidationError
from .model import VariantConfig


@dataclass(frozen=True)
class Dims:
    """Segment and model dimensioning."""

    t_frames: int = 8
    max_boxes: int = 6
    feat_dim: int = 32
    key_dim: int = 16

    def __post_init__(self):
        if min(self.t_frames, self.max_boxes, self.feat_dim, self.key_dim) < 1:
            raise ValidationError("all dims must be positive")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    decay: float = 0.5
    clip: float = 5.0

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValidationError("lr must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValidationError("momentum must be in [0, 1)")
        if not (0.0 < self.decay <= 1.0):
            raise ValidationError("decay must be in (0, 1]")
        if self.clip <= 0.0:
            raise ValidationError("clip must be positive")


@dataclass(frozen=True)
class RunConfig:
    variant: VariantConfig = VariantConfig()
    dims: Dims = Dims()
    optimizer: OptimConfig = OptimConfig()
    world: WorldSpec = WorldSpec()
    data_dir: str = "data/train"
    eval_dir: str = ""
    out_dir: str = "run"
    seed: int = 0
    epochs: int = 20
    num_classes: int = 1
    n_pos: int = 400
    n_neg: int = 1200
    node_only: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")
        if self.n_pos < 0 or self.n_neg < 0:
            raise ValidationError("segment counts must be >= 0")
        if self.world.t_frames != self.dims.t_frames or self.world.max_boxes != self.dims.max_boxes:
            raise ValidationError("world and dims disagree on t_frames/max_boxes")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["variant"] = self.variant.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if "variant" in doc:
            doc["variant"] = VariantConfig.from_json(doc["variant"])
        if "dims" in doc:
            doc["dims"] = Dims(**doc["dims"])
        if "optimizer" in doc:
            doc["optimizer"] = OptimConfig(**doc["optimizer"])
        if "world" in doc:
            doc["world"] = WorldSpec.from_json(doc["world"])
        return cls(**doc)


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path}: {exc}") from exc
    return RunConfig.from_json(doc)


def save_config(path, config: RunConfig):
    Path(path).write_text(json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n")


# flag name -> (section, field) used when merging argparse overrides
_SCALAR_FLAGS = {
    "data_dir": (None, "data_dir"),
    "eval_dir": (None, "eval_dir"),
    "out_dir": (None, "out_dir"),
    "seed": (None, "seed"),
    "epochs": (None, "epochs"),
    "num_classes": (None, "num_classes"),
    "n_pos": (None, "n_pos"),
    "n_neg": (None, "n_neg"),
    "node_only": (None, "node_only"),
    "edge_mode": ("variant", "edge_mode"),
    "hierarchy": ("variant", "hierarchy"),
    "temporal_aggregator": ("variant", "temporal_aggregator"),
    "t_frames": ("dims", "t_frames"),
    "max_boxes": ("dims", "max_boxes"),
    "feat_dim": ("dims", "feat_dim"),
    "key_dim": ("dims", "key_dim"),
    "lr": ("optimizer", "lr"),
    "momentum": ("optimizer", "momentum"),
    "decay": ("optimizer", "decay"),
    "clip": ("optimizer", "clip"),
}


def merge_flags(config: RunConfig, flags: dict) -> RunConfig:
    """Apply explicit (non-None) flag values on top of a config.

    Dims overrides are mirrored into the world so the two stay consistent.
    """
    sections: dict = {}
    scalars: dict = {}
    for name, value in flags.items():
        if value is None or name not in _SCALAR_FLAGS:
            continue
        section, fname = _SCALAR_FLAGS[name]
        if section is None:
            scalars[fname] = value
        else:
            sections.setdefault(section, {})[fname] = value
    out = config
    if "variant" in sections:
        out = replace(out, variant=replace(out.variant, **sections["variant"]))
    if "dims" in sections:
        dims = replace(out.dims, **sections["dims"])
        world_sync = {
            k: v for k, v in sections["dims"].items() if k in ("t_frames", "max_boxes")
        }
        out = replace(out, dims=dims, world=replace(out.world, **world_sync))
    if "optimizer" in sections:
        out = replace(out, optimizer=replace(out.optimizer, **sections["optimizer"]))
    if scalars:
        out = replace(out, **scalars)
    return out
