import json

import pytest

from stag.config import (
    Dims,
    OptimConfig,
    RunConfig,
    load_config,
    merge_flags,
    save_config,
)
from stag.data import WorldSpec
from stag.errors import ValidationError
from stag.model import VariantConfig

SMALL_WORLD = WorldSpec(
    t_frames=3, max_boxes=3, arena=24, channels=3,
    n_objects_min=2, n_objects_max=3, size_min=4.0, size_max=8.0,
)

SMALL = RunConfig(dims=Dims(t_frames=3, max_boxes=3, feat_dim=8, key_dim=4), world=SMALL_WORLD)


def test_json_round_trip_identity():
    for config in (RunConfig(), SMALL, RunConfig(node_only=True, seed=9, epochs=0)):
        assert RunConfig.from_json(config.to_json()) == config


def test_json_doc_is_serializable():
    doc = SMALL.to_json()
    assert RunConfig.from_json(json.loads(json.dumps(doc))) == SMALL


def test_file_round_trip(tmp_path):
    path = tmp_path / "config.json"
    save_config(path, SMALL)
    assert load_config(path) == SMALL
    assert path.read_text().endswith("\n")


def test_unknown_keys_rejected():
    doc = RunConfig().to_json()
    doc["learning_rate"] = 0.1
    with pytest.raises(ValidationError, match="learning_rate"):
        RunConfig.from_json(doc)


def test_bad_json_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json")
    with pytest.raises(ValidationError):
        load_config(path)


def test_world_dims_must_agree():
    with pytest.raises(ValidationError, match="t_frames"):
        RunConfig(dims=Dims(t_frames=4, max_boxes=6))


def test_optimizer_validation():
    with pytest.raises(ValidationError):
        OptimConfig(lr=0.0)
    with pytest.raises(ValidationError):
        OptimConfig(momentum=1.0)
    with pytest.raises(ValidationError):
        OptimConfig(decay=0.0)
    OptimConfig(decay=1.0)  # flat schedule is allowed


def test_scalar_validation():
    with pytest.raises(ValidationError):
        RunConfig(epochs=-1)
    with pytest.raises(ValidationError):
        RunConfig(num_classes=0)
    with pytest.raises(ValidationError):
        Dims(feat_dim=0)


def test_merge_ignores_none_and_unknown():
    merged = merge_flags(SMALL, {"lr": None, "command": "train", "checkpoint": "x"})
    assert merged == SMALL


def test_merge_scalar_and_sections():
    merged = merge_flags(
        SMALL,
        {"seed": 7, "epochs": 3, "lr": 0.2, "edge_mode": "cosine_sim", "node_only": True},
    )
    assert merged.seed == 7 and merged.epochs == 3 and merged.node_only
    assert merged.optimizer.lr == 0.2
    assert merged.variant == VariantConfig(edge_mode="cosine_sim")
    assert merged.world == SMALL.world  # untouched sections survive


def test_merge_dims_mirrors_world():
    merged = merge_flags(RunConfig(), {"t_frames": 4, "feat_dim": 16})
    assert merged.dims.t_frames == 4 and merged.dims.feat_dim == 16
    assert merged.world.t_frames == 4
    assert merged.world.max_boxes == RunConfig().world.max_boxes


def test_merge_flags_win_over_file(tmp_path):
    path = tmp_path / "config.json"
    save_config(path, SMALL)
    merged = merge_flags(load_config(path), {"lr": 0.5})
    assert merged.optimizer.lr == 0.5
    assert merged.dims == SMALL.dims
