"""Versioned checkpoints: every parameter group, optimizer state, config
echo and RNG state in one archive guarded by a magic string."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import torch

from .config import ExperimentConfig, config_from_dict, config_hash, run_id
from .errors import ConfigurationError, DataError, MissingPrerequisiteError
from .networks import GROUPS, NetworkState

MAGIC = "CUDANET-CKPT-v1"


def save_checkpoint(
    path: Path,
    state: NetworkState,
    cfg: ExperimentConfig,
    *,
    extra: Optional[dict] = None,
) -> Path:
    """Serialize the full network state plus provenance to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "magic": MAGIC,
        "groups": {name: state.nets[name].state_dict() for name in GROUPS},
        "optimizer": state.extra.get("optimizer", {}),
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "run_id": run_id(cfg, "train"),
        "stage": state.stage,
        "frozen": sorted(state.frozen),
        "rng": {"torch": torch.get_rng_state()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(
    path: Path, cfg: Optional[ExperimentConfig] = None
) -> tuple[NetworkState, dict]:
    """Load a checkpoint into a freshly built state.

    When ``cfg`` is given its model sizes must match the stored tensors;
    otherwise the state is rebuilt from the checkpoint's own config echo.
    """
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unpickling error types
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise DataError(
            f"{path} is not a valid checkpoint (expected magic {MAGIC!r})"
        )
    if cfg is None:
        cfg = config_from_dict(payload["config"])
    state = NetworkState.initialize(cfg.model, cfg.dataset.num_classes, cfg.seed)
    try:
        for name in GROUPS:
            state.nets[name].load_state_dict(payload["groups"][name])
    except (RuntimeError, KeyError) as exc:
        raise ConfigurationError(
            f"checkpoint/config mismatch (model sizes) for {path} "
            f"[format {MAGIC}]: {exc}"
        ) from exc
    state.stage = payload.get("stage", "s2m")
    state.set_frozen(set(payload.get("frozen", [])))
    return state, payload
