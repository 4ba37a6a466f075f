"""Shared fixtures.

The expensive session fixtures (`desk_run`, `motivation_run`) execute the
full desk-scale experiments exactly once per pytest session; every
acceptance check then reads from their artifacts.  Unit tests use tiny
inline configs instead and never touch these.
"""

from __future__ import annotations

import time
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

REPO = Path(__file__).resolve().parent.parent
CONFIGS = REPO / "configs"

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(name: str, passed: bool, detail: str) -> None:
    """Log one acceptance-criterion verdict for the terminal summary."""
    _ACCEPTANCE[name] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[name]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE: {name} {verdict} — {detail}")


@pytest.fixture(scope="session")
def desk_cfg(tmp_path_factory):
    from cudanet.config import load_config

    out = tmp_path_factory.mktemp("desk64")
    return load_config(CONFIGS / "desk64.yaml", out_dir=str(out))


@pytest.fixture(scope="session")
def desk_run(desk_cfg):
    """Full ablation on the desk config: every arm trained and evaluated."""
    from cudanet.ablation import run_ablation

    t0 = time.monotonic()
    results = run_ablation(desk_cfg, Path(desk_cfg.out_dir) / "ablation")
    results["wall_seconds"] = time.monotonic() - t0
    results["cfg"] = desk_cfg
    return results


@pytest.fixture(scope="session")
def motivation_run(tmp_path_factory):
    from cudanet.ablation import run_motivation
    from cudanet.config import load_config

    out = tmp_path_factory.mktemp("motivation")
    cfg = load_config(CONFIGS / "motivation.yaml", out_dir=str(out))
    res = run_motivation(cfg, Path(cfg.out_dir))
    res["cfg"] = cfg
    return res


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """Small real dataset (8/4/8) shared by unit tests that need images."""
    from cudanet.config import load_config
    from cudanet.synth import build_tridomain_dataset

    out = tmp_path_factory.mktemp("mini_ds")
    cfg = load_config(CONFIGS / "mini.yaml", out_dir=str(out))
    manifest = build_tridomain_dataset(cfg.dataset, cfg.dataset_root())
    return cfg, manifest
