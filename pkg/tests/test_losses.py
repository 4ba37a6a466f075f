"""Loss oracles: pixel-MSE degeneration, CE identities, adversarial stubs."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cudanet.config import LossWeights, ModelConfig
from cudanet.errors import (
    ConfigurationError,
    DataError,
    NumericalError,
    ShapeError,
    UndefinedLossError,
)
from cudanet.losses import (
    DEEP_WEIGHTS,
    IGNORE_ID,
    SHALLOW_WEIGHTS,
    FdnBatch,
    PerceptualExtractor,
    adversarial_losses,
    fdn_loss,
    perceptual_loss,
    segmentation_loss,
)
from cudanet.networks import STAGE_PAIRS, NetworkState, image_batch


def test_stage_pairs_use_the_right_private_encoders():
    assert STAGE_PAIRS["s2m"][0][1] == "sty_s" and STAGE_PAIRS["s2m"][1][1] == "sty_m"
    assert STAGE_PAIRS["m2t"][0][1] == "fog_m" and STAGE_PAIRS["m2t"][1][1] == "fog_t"
    assert STAGE_PAIRS["s2t"][0][1] == "dual_s" and STAGE_PAIRS["s2t"][1][1] == "dual_t"


# ---------------------------------------------------------------------------
# perceptual
# ---------------------------------------------------------------------------


def test_identity_extractor_is_pixel_mse():
    rng = np.random.default_rng(1)
    a = torch.from_numpy(rng.random((2, 3, 8, 8)).astype(np.float32))
    b = torch.from_numpy(rng.random((2, 3, 8, 8)).astype(np.float32))
    got = perceptual_loss(a, b, PerceptualExtractor.identity())
    want = torch.mean((a - b) ** 2)
    assert torch.allclose(got, want, rtol=0, atol=0)


def test_perceptual_zero_on_equal_inputs():
    ext = PerceptualExtractor.fixed_random(seed=0)
    x = torch.rand(1, 3, 16, 16)
    assert float(perceptual_loss(x, x, ext)) == 0.0


class _Zero(torch.nn.Module):
    def forward(self, x):
        return torch.zeros_like(x)


def test_weight_profiles_select_levels():
    ext = PerceptualExtractor([torch.nn.Identity(), _Zero()], (0.5, 0.5))
    a = torch.rand(1, 3, 4, 4, generator=torch.Generator().manual_seed(4))
    b = torch.rand(1, 3, 4, 4, generator=torch.Generator().manual_seed(5))
    mse = torch.mean((a - b) ** 2)
    assert torch.allclose(perceptual_loss(a, b, ext, (1.0, 0.0)), mse)
    assert float(perceptual_loss(a, b, ext, (0.0, 1.0))) == 0.0
    assert torch.allclose(perceptual_loss(a, b, ext, (0.25, 0.75)), 0.25 * mse)
    assert SHALLOW_WEIGHTS == tuple(reversed(DEEP_WEIGHTS))
    assert sum(SHALLOW_WEIGHTS) == pytest.approx(1.0)


def test_normalized_levels_emit_standardized_features():
    # levels 2..4 are instance-normalized: per-sample, per-channel spatial
    # statistics are fixed, which is what makes them appearance-insensitive
    ext = PerceptualExtractor.fixed_random(seed=2)
    x = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(4))
    feats = ext.features(x)
    assert len(feats) == 4
    for f in feats[1:]:
        mu = f.mean(dim=(2, 3))
        var = f.var(dim=(2, 3), unbiased=False)
        assert torch.allclose(mu, torch.zeros_like(mu), atol=1e-4)
        # var/(var + eps) stays a bit under 1 for small-magnitude features
        assert (var <= 1.0 + 1e-4).all() and (var >= 0.9).all()


def test_perceptual_weight_validation():
    ext = PerceptualExtractor.fixed_random(seed=0)
    x = torch.rand(1, 3, 16, 16)
    with pytest.raises(ConfigurationError):
        perceptual_loss(x, x, ext, (1.0,))  # wrong arity
    with pytest.raises(ConfigurationError):
        perceptual_loss(x, x, ext, (0.7, 0.2, 0.2, 0.2))  # does not sum to 1
    with pytest.raises(ConfigurationError):
        perceptual_loss(x, x, ext, (-0.5, 0.5, 0.5, 0.5))
    with pytest.raises(ShapeError):
        perceptual_loss(x, torch.rand(1, 3, 8, 8), ext)


def test_extractor_is_frozen_and_deterministic():
    a = PerceptualExtractor.fixed_random(seed=9)
    b = PerceptualExtractor.fixed_random(seed=9)
    x = torch.rand(1, 3, 16, 16)
    fa, fb = a.features(x), b.features(x)
    assert all(torch.equal(u, v) for u, v in zip(fa, fb))
    assert all(not p.requires_grad for p in a.parameters())


# ---------------------------------------------------------------------------
# segmentation cross-entropy
# ---------------------------------------------------------------------------


@given(
    num_classes=st.integers(min_value=2, max_value=5),
    h=st.integers(min_value=1, max_value=6),
    w=st.integers(min_value=1, max_value=6),
)
@settings(max_examples=30, deadline=None)
def test_uniform_heatmap_gives_log_c(num_classes, h, w):
    heat = torch.full((1, num_classes, h, w), 1.0 / num_classes)
    labels = torch.randint(0, num_classes, (1, h, w))
    loss = float(segmentation_loss(heat, labels))
    assert abs(loss - math.log(num_classes)) < 1e-6


def test_perfect_prediction_near_zero():
    labels = torch.randint(0, 3, (1, 4, 4))
    heat = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).float()
    assert float(segmentation_loss(heat, labels)) < 1e-5


def test_ignore_pixels_do_not_contribute():
    heat = torch.rand(1, 3, 2, 2)
    heat = heat / heat.sum(dim=1, keepdim=True)
    labels = torch.tensor([[[0, 1], [2, 0]]])
    base = segmentation_loss(heat, labels)
    # replace one pixel with ignore: result equals mean over remaining three
    labels2 = labels.clone()
    labels2[0, 1, 1] = IGNORE_ID
    per_pixel = -torch.log(heat.gather(1, labels.unsqueeze(1)).squeeze(1))
    want = per_pixel.flatten()[:3].mean()  # pixels (0,0),(0,1),(1,0)
    got = segmentation_loss(heat, labels2)
    assert torch.allclose(got, want, atol=1e-6)
    assert not torch.allclose(base, got)


def test_all_ignored_is_undefined():
    heat = torch.full((1, 3, 2, 2), 1 / 3)
    labels = torch.full((1, 2, 2), IGNORE_ID, dtype=torch.long)
    with pytest.raises(UndefinedLossError):
        segmentation_loss(heat, labels)


def test_label_out_of_range_is_data_error():
    heat = torch.full((1, 3, 2, 2), 1 / 3)
    labels = torch.tensor([[[0, 1], [2, 3]]])
    with pytest.raises(DataError):
        segmentation_loss(heat, labels)
    with pytest.raises(ShapeError):
        segmentation_loss(heat, torch.zeros(1, 3, 3, dtype=torch.long))


# ---------------------------------------------------------------------------
# adversarial
# ---------------------------------------------------------------------------


class _ConstantDisc:
    """Stub discriminator that returns a constant two-channel field."""

    def __init__(self, p_src: float, h: int = 2, w: int = 2):
        self.p_src = p_src
        self.h, self.w = h, w

    def __call__(self, heat: torch.Tensor) -> torch.Tensor:
        b = heat.shape[0]
        out = torch.empty(b, 2, self.h, self.w)
        out[:, 1] = self.p_src
        out[:, 0] = 1.0 - self.p_src
        return out


def test_adversarial_values_against_stub():
    heat = torch.full((3, 5, 8, 8), 0.2, requires_grad=True)
    gen, disc = adversarial_losses(heat, heat, _ConstantDisc(0.5, h=2, w=2))
    # undecided discriminator: gen pays ln2 per output cell, disc pays ln2
    assert float(gen) == pytest.approx(2 * 2 * math.log(2), rel=1e-6)
    assert float(disc) == pytest.approx(math.log(2), rel=1e-6)

    gen_hi, disc_hi = adversarial_losses(heat, heat, _ConstantDisc(0.9, h=1, w=1))
    assert float(gen_hi) == pytest.approx(-math.log(0.9), rel=1e-5)
    # disc: 0.5*(-ln 0.9) + 0.5*(-ln 0.1)
    assert float(disc_hi) == pytest.approx(
        0.5 * -math.log(0.9) + 0.5 * -math.log(0.1), rel=1e-5
    )


def test_adversarial_disc_output_checked():
    heat = torch.full((1, 5, 8, 8), 0.2)

    class Bad1:
        def __call__(self, h):
            return torch.zeros(1, 1, 2, 2)

    class BadNan:
        def __call__(self, h):
            out = torch.full((1, 2, 2, 2), 0.5)
            out[0, 0, 0, 0] = float("nan")
            return out

    with pytest.raises(ShapeError):
        adversarial_losses(heat, heat, Bad1())
    with pytest.raises(NumericalError):
        adversarial_losses(heat, heat, BadNan())


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------


def _tiny_state(seed=0):
    return NetworkState.initialize(ModelConfig(d_c=8, d_z=4, base_channels=4), 5, seed)


def _tiny_batch(seed=0):
    rng = np.random.default_rng(seed)
    x1 = image_batch(rng.random((2, 16, 16, 3), dtype=np.float32))
    x2 = image_batch(rng.random((2, 16, 16, 3), dtype=np.float32))
    y1 = torch.from_numpy(rng.integers(0, 5, size=(2, 16, 16)))
    return FdnBatch(x1=x1, y1=y1, x2=x2, pair="s2m")


def test_fdn_total_is_exact_weighted_sum():
    state = _tiny_state()
    weights = LossWeights(lambda_rec=0.5, lambda_trans=0.1, lambda_seg=1.0, lambda_segadv=1.0)
    ext = PerceptualExtractor.fixed_random(seed=0)
    out = fdn_loss(_tiny_batch(), weights, ext, state)
    rebuilt = (
        weights.lambda_rec * out.rec
        + weights.lambda_trans * out.trans
        + weights.lambda_seg * (out.seg1 + out.seg12)
        + weights.lambda_segadv * out.segadv
    )
    assert torch.equal(out.total, rebuilt)
    floats = out.component_floats()
    assert set(floats) == {"loss", "rec", "trans", "seg", "seg_trans", "segadv", "aux", "disc"}
    assert all(math.isfinite(v) for v in floats.values())


def test_fdn_zero_weights_zero_the_total():
    state = _tiny_state()
    ext = PerceptualExtractor.fixed_random(seed=0)
    zero = LossWeights(lambda_rec=0.0, lambda_trans=0.0, lambda_seg=0.0, lambda_segadv=0.0)
    out = fdn_loss(_tiny_batch(), zero, ext, state)
    assert float(out.total.detach()) == 0.0
    assert float(out.rec.detach()) > 0.0  # components are still reported


def test_fdn_disc_loss_is_isolated_from_generator():
    state = _tiny_state()
    ext = PerceptualExtractor.fixed_random(seed=0)
    out = fdn_loss(_tiny_batch(), LossWeights(), ext, state)
    grads = torch.autograd.grad(
        out.disc_loss,
        list(state.nets["content_encoder"].parameters()),
        allow_unused=True,
        retain_graph=True,
    )
    assert all(g is None for g in grads)
    # while the generator-side adversarial term must reach the encoder
    grads2 = torch.autograd.grad(
        out.segadv,
        list(state.nets["content_encoder"].parameters()),
        allow_unused=True,
    )
    assert any(g is not None for g in grads2)


def test_fdn_unknown_pair():
    state = _tiny_state()
    ext = PerceptualExtractor.identity()
    batch = _tiny_batch()
    batch.pair = "t2s"
    with pytest.raises(ConfigurationError):
        fdn_loss(batch, LossWeights(), ext, state)
