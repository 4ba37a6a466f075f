"""Checkpoint format: magic, roundtrip fidelity, mismatch detection."""

import numpy as np
import pytest
import torch

from cudanet.config import ExperimentConfig, ModelConfig
from cudanet.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from cudanet.errors import ConfigurationError, DataError, MissingPrerequisiteError
from cudanet.networks import GROUPS, NetworkState

MODEL = ModelConfig(d_c=8, d_z=4, base_channels=4)


def _cfg():
    return ExperimentConfig(model=MODEL)


def _state(seed=0):
    return NetworkState.initialize(MODEL, num_classes=5, seed=seed)


def test_roundtrip_preserves_every_group(tmp_path):
    cfg = _cfg()
    state = _state()
    with torch.no_grad():  # move away from init so a silent re-init would show
        next(state.nets["decoder"].parameters()).add_(0.25)
    state.stage = "m2t"
    state.set_frozen({"sty_s", "sty_m"})
    path = save_checkpoint(tmp_path / "a.ckpt", state, cfg)
    loaded, payload = load_checkpoint(path, cfg)
    for g in GROUPS:
        assert loaded.group_hash(g) == state.group_hash(g)
    assert loaded.stage == "m2t"
    assert loaded.frozen == {"sty_s", "sty_m"}
    assert payload["magic"] == MAGIC
    assert payload["config_hash"]
    assert payload["stage"] == "m2t"


def test_load_without_config_uses_embedded_echo(tmp_path):
    cfg = _cfg()
    state = _state(seed=4)
    path = save_checkpoint(tmp_path / "b.ckpt", state, cfg)
    loaded, payload = load_checkpoint(path)
    for g in GROUPS:
        assert loaded.group_hash(g) == state.group_hash(g)
    assert payload["config"]["model"]["d_c"] == MODEL.d_c


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingPrerequisiteError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_corrupt_file_is_data_error(tmp_path):
    path = tmp_path / "garbage.ckpt"
    path.write_bytes(b"\x00\x01\x02 this is not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_wrong_payload_names_expected_format(tmp_path):
    path = tmp_path / "other.ckpt"
    torch.save({"magic": "SOMETHING-ELSE"}, path)
    with pytest.raises(DataError, match="CUDANET-CKPT-v1"):
        load_checkpoint(path)
    torch.save([1, 2, 3], tmp_path / "list.ckpt")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "list.ckpt")


def test_model_size_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", _state(), _cfg())
    bigger = ExperimentConfig(model=ModelConfig(d_c=16, d_z=4, base_channels=4))
    with pytest.raises(ConfigurationError, match="mismatch"):
        load_checkpoint(path, bigger)


def test_optimizer_state_saved_after_training(tmp_path, mini_dataset):
    from cudanet.decomposition import run_decomposition, stage_checkpoint_path

    cfg, manifest = mini_dataset
    run_decomposition(manifest, cfg, tmp_path)
    _, payload = load_checkpoint(stage_checkpoint_path(tmp_path, "s2m"), cfg)
    assert set(payload["optimizer"]) == {"gen", "disc"}
    assert payload["optimizer"]["gen"]["param_groups"]
    assert payload["run_id"] and payload["config_hash"]


def test_two_saves_are_logically_identical(tmp_path):
    # archive bytes differ (zip timestamps); equality must be parameter-level
    cfg = _cfg()
    state = _state()
    a, _ = load_checkpoint(save_checkpoint(tmp_path / "x.ckpt", state, cfg), cfg)
    b, _ = load_checkpoint(save_checkpoint(tmp_path / "y.ckpt", state, cfg), cfg)
    for g in GROUPS:
        assert a.group_hash(g) == b.group_hash(g) == state.group_hash(g)
