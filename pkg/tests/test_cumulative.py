"""Triangle loss oracles and the cyclical freeze-scheduled loop."""

import dataclasses
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cudanet.config import ExperimentConfig, ModelConfig
from cudanet.cumulative import (
    PHASE_FROZEN,
    PHASES,
    CyclicBatch,
    _verify_frozen,
    cumulative_loss,
    cumulative_residual,
    cycle_checkpoint_path,
    final_loss,
    private_distance,
    run_cyclic_training,
)
from cudanet.errors import (
    ConfigurationError,
    NumericalError,
    PipelineError,
    ShapeError,
)
from cudanet.losses import PerceptualExtractor
from cudanet.networks import GROUPS, NetworkState, image_batch


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def test_private_distance_hand_values():
    za = torch.tensor([[1.0, 2.0]])
    zb = torch.tensor([[0.0, 0.0]])
    assert float(private_distance(za, zb, "l1")) == 3.0
    assert float(private_distance(torch.tensor([[3.0, 4.0]]), zb, "l2")) == 5.0
    e1 = torch.tensor([[1.0, 0.0]])
    e2 = torch.tensor([[0.0, 1.0]])
    assert float(private_distance(e1, e2, "cosine")) == pytest.approx(1.0)
    assert float(private_distance(e1, e1, "cosine")) == pytest.approx(0.0)
    assert float(private_distance(e1, -e1, "cosine")) == pytest.approx(2.0)


def test_private_distance_batch_mean_and_1d():
    za = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    zb = torch.zeros(2, 2)
    assert float(private_distance(za, zb, "l1")) == pytest.approx(1.5)
    # 1-d inputs are treated as a single sample
    assert float(private_distance(torch.tensor([3.0, 4.0]), torch.zeros(2), "l2")) == 5.0


def test_private_distance_errors():
    with pytest.raises(ConfigurationError):
        private_distance(torch.zeros(1, 2), torch.zeros(1, 2), "linf")
    with pytest.raises(ShapeError):
        private_distance(torch.zeros(1, 2), torch.zeros(1, 3), "l2")
    with pytest.raises(NumericalError):
        private_distance(torch.zeros(1, 2), torch.ones(1, 2), "cosine")


@given(
    z=hnp.arrays(
        np.float64,
        st.tuples(st.integers(1, 4), st.integers(1, 6)),
        elements=st.floats(-10, 10, allow_nan=False),
    ),
    metric=st.sampled_from(["l1", "l2"]),
)
@settings(max_examples=50, deadline=None)
def test_distance_is_zero_iff_equal(z, metric):
    za = torch.from_numpy(z)
    assert float(private_distance(za, za.clone(), metric)) == 0.0
    shifted = za + 1.0
    assert float(private_distance(za, shifted, metric)) > 0.0


# ---------------------------------------------------------------------------
# triangle residual
# ---------------------------------------------------------------------------


def test_cumulative_residual_values():
    assert cumulative_residual(0.3, 0.5, 0.8) == 0.0
    assert cumulative_residual(0.3, 0.5, 0.6) == pytest.approx(0.04, abs=1e-15)
    assert cumulative_residual(1.0, 1.0, 3.0) == 1.0
    out = cumulative_residual(torch.tensor(0.3), torch.tensor(0.5), torch.tensor(0.99))
    assert isinstance(out, torch.Tensor)


@given(
    d_style=st.floats(0, 5, allow_nan=False),
    d_fog=st.floats(0, 5, allow_nan=False),
    d_dual=st.floats(0, 10, allow_nan=False),
)
@settings(max_examples=100, deadline=None)
def test_residual_nonnegative_and_symmetric_in_the_sum(d_style, d_fog, d_dual):
    r = cumulative_residual(d_style, d_fog, d_dual)
    assert r >= 0.0
    assert r == cumulative_residual(d_fog, d_style, d_dual)


def test_cumulative_loss_zero_on_consistent_geometry():
    # collinear codes: style distance 1, fog distance 2, dual distance 3
    zero = torch.zeros(1, 4)
    e = torch.zeros(1, 4)
    e[0, 0] = 1.0
    loss = cumulative_loss((e, zero), (2 * e, zero), (3 * e, zero), "l2")
    assert float(loss) == 0.0
    broken = cumulative_loss((e, zero), (2 * e, zero), (4 * e, zero), "l2")
    assert float(broken) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# final_loss
# ---------------------------------------------------------------------------

MODEL = ModelConfig(d_c=8, d_z=4, base_channels=4)


def _cyclic_batch(seed=0):
    rng = np.random.default_rng(seed)
    mk = lambda s: image_batch(rng.random((2, 16, 16, 3), dtype=np.float32))
    return CyclicBatch(
        x_s=mk("s"),
        y_s=torch.from_numpy(rng.integers(0, 5, size=(2, 16, 16))),
        x_m=mk("m"),
        x_t=mk("t"),
        pseudo_m=torch.from_numpy(rng.integers(0, 5, size=(2, 16, 16))),
    )


def _cfg(lambda_cum=0.25):
    cfg = ExperimentConfig(model=MODEL)
    cfg.train.cyclic.lambda_cum = lambda_cum
    return cfg


def test_final_loss_is_pair_plus_weighted_triangle():
    state = NetworkState.initialize(MODEL, 5, seed=0)
    ext = PerceptualExtractor.fixed_random(seed=0)
    cfg = _cfg(0.25)
    for phase in PHASES:
        out = final_loss(phase, _cyclic_batch(), state, cfg, ext)
        rebuilt = out.pair.total + 0.25 * out.cum
        assert torch.equal(out.total, rebuilt)
        assert float(out.cum.detach()) >= 0.0


def test_final_loss_lambda_zero_matches_pair_bitwise():
    state = NetworkState.initialize(MODEL, 5, seed=0)
    ext = PerceptualExtractor.fixed_random(seed=0)
    out = final_loss("style", _cyclic_batch(), state, _cfg(0.0), ext)
    assert torch.equal(out.total, out.pair.total)


def test_final_loss_guards():
    state = NetworkState.initialize(MODEL, 5, seed=0)
    ext = PerceptualExtractor.fixed_random(seed=0)
    batch = _cyclic_batch()
    batch.pseudo_m = None
    with pytest.raises(PipelineError):
        final_loss("fog", batch, state, _cfg(), ext)
    with pytest.raises(ConfigurationError):
        final_loss("warp", batch, state, _cfg(), ext)


# ---------------------------------------------------------------------------
# cyclical loop
# ---------------------------------------------------------------------------


def test_cyclic_requires_completed_pipeline(tmp_path, mini_dataset):
    cfg, manifest = mini_dataset
    state = NetworkState.initialize(cfg.model, cfg.dataset.num_classes, cfg.seed)
    assert state.stage == "s2m"
    with pytest.raises(PipelineError):
        run_cyclic_training(state, manifest, cfg, tmp_path)


def test_verify_frozen_detects_drift():
    state = NetworkState.initialize(MODEL, 5, seed=0)
    good = {g: state.group_hash(g) for g in ("sty_s", "sty_m")}
    _verify_frozen(state, good, cycle=1, phase="dual", step=0)  # no-op
    bad = dict(good, sty_s="0" * 64)
    with pytest.raises(PipelineError, match="freeze schedule violated"):
        _verify_frozen(state, bad, cycle=1, phase="dual", step=0)


def test_cyclic_loop_checkpoints_freezes_and_resumes(tmp_path, mini_dataset):
    cfg, manifest = mini_dataset
    state = NetworkState.initialize(cfg.model, cfg.dataset.num_classes, cfg.seed)
    state.stage = "s2t"  # pretend the stage pipeline finished
    out = run_cyclic_training(state.clone(), manifest, cfg, tmp_path, resume=False)

    for phase in PHASES:
        assert cycle_checkpoint_path(tmp_path, 1, phase).exists()
        records = [
            json.loads(l)
            for l in (tmp_path / f"train_cyclic_1_{phase}.jsonl").read_text().splitlines()
        ]
        assert records, phase
        assert {"cum", "final", "cycle", "phase", "loss"} <= set(records[0])
        assert all(r["phase"] == phase and r["cycle"] == 1 for r in records)
        assert all(math.isfinite(r["cum"]) and r["cum"] >= 0 for r in records)
    assert (tmp_path / "final.ckpt").exists()
    assert out.frozen == set()

    # the frozen pairs of the last (dual) phase never moved during it
    from cudanet.checkpoint import load_checkpoint

    fog_state, _ = load_checkpoint(cycle_checkpoint_path(tmp_path, 1, "fog"), cfg)
    dual_state, _ = load_checkpoint(cycle_checkpoint_path(tmp_path, 1, "dual"), cfg)
    for g in PHASE_FROZEN["dual"]:
        assert dual_state.group_hash(g) == fog_state.group_hash(g)
    for g in ("dual_s", "dual_t", "content_encoder"):
        assert dual_state.group_hash(g) != fog_state.group_hash(g)

    # resume with final.ckpt present: pure load, same parameters
    again = run_cyclic_training(state.clone(), manifest, cfg, tmp_path, resume=True)
    for g in GROUPS:
        assert again.group_hash(g) == out.group_hash(g)
