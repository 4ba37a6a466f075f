"""The four training losses of one adaptation unit.

* reconstruction: shallow-weighted perceptual distance between each image
  and its own-domain reconstruction;
* translation: deep-weighted perceptual distance between each image and its
  cross-domain translation (content preserved, appearance swapped);
* segmentation: masked cross-entropy on probability heatmaps, applied to the
  labeled side and to its translation (which inherits the same labels);
* adversarial: output-space alignment, fooling a discriminator that scores
  segmentation heatmaps as labeled-side vs unlabeled-side.

The perceptual stack is a fixed, seeded random conv pyramid: level 1 is raw
(sensitive to photometry), deeper levels are instance-normalized (mostly
appearance-invariant), so a shallow weight profile behaves like a pixel loss
and a deep profile like a content loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .config import LossWeights
from .errors import (
    ConfigurationError,
    DataError,
    NumericalError,
    ShapeError,
    UndefinedLossError,
)
from .networks import (
    NetworkState,
    STAGE_PAIRS,
    decode,
    encode_content_with_tap,
    encode_private,
    segment,
    segment_aux,
)
from .seeding import derive_seed

EPS = 1e-7

IGNORE_ID = 255

SHALLOW_WEIGHTS = (0.5, 0.3, 0.15, 0.05)
DEEP_WEIGHTS = (0.05, 0.15, 0.3, 0.5)


class _PerceptualLevel(nn.Module):
    """One pyramid level: stride-2 conv, LeakyReLU, optional instance norm."""

    def __init__(self, cin: int, cout: int, normalize: bool):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.normalize = normalize

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = nn.functional.leaky_relu(self.conv(x), 0.2)
        if self.normalize:
            mu = y.mean(dim=(2, 3), keepdim=True)
            var = y.var(dim=(2, 3), keepdim=True, unbiased=False)
            y = (y - mu) / torch.sqrt(var + 1e-5)
        return y


class PerceptualExtractor(nn.Module):
    """Fixed (non-trainable) feature stack used by the perceptual losses.

    ``weights`` is the default per-level weight vector; the loss functions
    can substitute the shallow or deep profile explicitly.
    """

    def __init__(self, levels: Sequence[nn.Module], weights: Sequence[float]):
        super().__init__()
        self.levels = nn.ModuleList(levels)
        self.weights = tuple(float(w) for w in weights)
        _check_weights(self.weights, len(self.levels))
        self.requires_grad_(False)
        self.eval()

    @classmethod
    def fixed_random(cls, seed: int, channels: int = 8) -> "PerceptualExtractor":
        """Four-level seeded random stack; level 1 raw, levels 2-4 normalized."""
        torch.manual_seed(derive_seed(seed, "perceptual"))
        c = channels
        levels = [
            _PerceptualLevel(3, c, normalize=False),
            _PerceptualLevel(c, 2 * c, normalize=True),
            _PerceptualLevel(2 * c, 2 * c, normalize=True),
            _PerceptualLevel(2 * c, 2 * c, normalize=True),
        ]
        return cls(levels, SHALLOW_WEIGHTS)

    @classmethod
    def identity(cls) -> "PerceptualExtractor":
        """Single identity level: perceptual loss degenerates to pixel MSE."""
        return cls([nn.Identity()], (1.0,))

    def features(self, x: torch.Tensor) -> list:
        feats = []
        y = x
        for level in self.levels:
            y = level(y)
            feats.append(y)
        return feats


def _check_weights(weights: Sequence[float], n_levels: int) -> None:
    if len(weights) != n_levels:
        raise ConfigurationError(
            f"need one weight per level: {n_levels} levels, {len(weights)} weights"
        )
    if any(w < 0 for w in weights):
        raise ConfigurationError("perceptual level weights must be nonnegative")
    total = sum(weights)
    if abs(total - 1.0) > 1e-6:
        raise ConfigurationError(f"perceptual level weights must sum to 1, got {total}")


def perceptual_loss(
    a: torch.Tensor,
    b: torch.Tensor,
    extractor: PerceptualExtractor,
    weights: Optional[Sequence[float]] = None,
) -> torch.Tensor:
    """Weighted sum of per-level mean squared feature differences."""
    if a.shape != b.shape:
        raise ShapeError(f"perceptual_loss shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    w = tuple(weights) if weights is not None else extractor.weights
    _check_weights(w, len(extractor.levels))
    fa = extractor.features(a)
    fb = extractor.features(b)
    loss = None
    for wi, fai, fbi in zip(w, fa, fb):
        term = wi * torch.mean((fai - fbi) ** 2)
        loss = term if loss is None else loss + term
    return loss


def reconstruction_loss(
    x1: torch.Tensor,
    xhat1: torch.Tensor,
    x2: torch.Tensor,
    xhat2: torch.Tensor,
    extractor: PerceptualExtractor,
) -> torch.Tensor:
    """Within-domain reconstruction: shallow-weighted perceptual, both sides."""
    return perceptual_loss(x1, xhat1, extractor, SHALLOW_WEIGHTS) + perceptual_loss(
        x2, xhat2, extractor, SHALLOW_WEIGHTS
    )


def translation_loss(
    x1: torch.Tensor,
    x1to2: torch.Tensor,
    x2: torch.Tensor,
    x2to1: torch.Tensor,
    extractor: PerceptualExtractor,
) -> torch.Tensor:
    """Cross-domain translation: deep-weighted perceptual against the originals."""
    return perceptual_loss(x1, x1to2, extractor, DEEP_WEIGHTS) + perceptual_loss(
        x2, x2to1, extractor, DEEP_WEIGHTS
    )


def segmentation_loss(h: torch.Tensor, y: torch.Tensor, ignore_id: int = IGNORE_ID) -> torch.Tensor:
    """Mean cross-entropy of probability heatmaps over non-ignored pixels."""
    if h.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W) heatmap, got {tuple(h.shape)}")
    if y.shape != (h.shape[0], h.shape[2], h.shape[3]):
        raise ShapeError(
            f"label shape {tuple(y.shape)} does not match heatmap {tuple(h.shape)}"
        )
    num_classes = h.shape[1]
    valid = y != ignore_id
    if not bool(valid.any()):
        raise UndefinedLossError("segmentation loss undefined: all pixels are ignored")
    bad = valid & ((y < 0) | (y >= num_classes))
    if bool(bad.any()):
        raise DataError(
            f"label id out of range: found {int(y[bad][0])} with {num_classes} classes"
        )
    safe = torch.where(valid, y, torch.zeros_like(y))
    p_true = h.gather(1, safe.unsqueeze(1)).squeeze(1)
    p_true = p_true.clamp(EPS, 1.0 - EPS)
    return -(torch.log(p_true)[valid]).mean()


def _check_disc_output(d: torch.Tensor) -> None:
    if d.dim() != 4 or d.shape[1] != 2:
        raise ShapeError(f"expected (B, 2, h, w) discriminator output, got {tuple(d.shape)}")
    if not bool(torch.isfinite(d).all()):
        raise NumericalError("discriminator output is not finite")


def adversarial_losses(h2: torch.Tensor, h1: torch.Tensor, discriminator):
    """Fooling loss for the generator side and BCE for the discriminator.

    ``gen_loss`` sums ``-log p(source)`` over the discriminator's output grid
    of the unlabeled-side heatmap (batch-averaged); minimizing it pushes
    unlabeled-side predictions to look labeled-side. ``disc_loss`` is the
    two-sided BCE on detached heatmaps, so it updates only the discriminator.
    """
    d2 = discriminator(h2)
    _check_disc_output(d2)
    p_src = d2[:, 1].clamp(EPS, 1.0 - EPS)
    gen_loss = (-torch.log(p_src).sum(dim=(1, 2))).mean()

    d1_det = discriminator(h1.detach())
    d2_det = discriminator(h2.detach())
    _check_disc_output(d1_det)
    _check_disc_output(d2_det)
    p1_src = d1_det[:, 1].clamp(EPS, 1.0 - EPS)
    p2_tgt = d2_det[:, 0].clamp(EPS, 1.0 - EPS)
    disc_loss = 0.5 * (-torch.log(p1_src)).mean() + 0.5 * (-torch.log(p2_tgt)).mean()
    return gen_loss, disc_loss


@dataclass
class FdnBatch:
    """One training batch for an adaptation pair.

    ``x1`` is the labeled side (true labels for s, pseudo labels for m),
    ``x2`` the unlabeled side. ``pair`` names the active unit
    ("s2m", "m2t" or "s2t"); by default the state's stage tag is used.
    """

    x1: torch.Tensor
    y1: torch.Tensor
    x2: torch.Tensor
    pair: Optional[str] = None


@dataclass
class FdnOutput:
    """Total loss plus its components (tensors, for exact recombination)."""

    total: torch.Tensor
    rec: torch.Tensor
    trans: torch.Tensor
    seg1: torch.Tensor
    seg12: torch.Tensor
    segadv: torch.Tensor
    aux: torch.Tensor
    disc_loss: torch.Tensor

    def component_floats(self) -> dict:
        return {
            "loss": float(self.total.detach()),
            "rec": float(self.rec.detach()),
            "trans": float(self.trans.detach()),
            "seg": float(self.seg1.detach()),
            "seg_trans": float(self.seg12.detach()),
            "segadv": float(self.segadv.detach()),
            "aux": float(self.aux.detach()),
            "disc": float(self.disc_loss.detach()),
        }


def fdn_loss(
    batch: FdnBatch,
    weights: LossWeights,
    extractor: PerceptualExtractor,
    state: NetworkState,
) -> FdnOutput:
    """Forward one batch through the active unit and assemble the objective.

    The combined loss is
    ``lambda_rec * rec + lambda_trans * trans + lambda_seg * (seg1 + seg12)
    + lambda_segadv * segadv``.  The auxiliary-head cross-entropy and the
    discriminator loss are returned alongside but are not part of ``total``;
    the training loop adds/steps them separately.
    """
    pair = batch.pair or state.stage
    if pair not in STAGE_PAIRS:
        raise ConfigurationError(f"unknown adaptation pair {pair!r}")
    (_, enc1), (_, enc2) = STAGE_PAIRS[pair]

    c1, tap1 = encode_content_with_tap(batch.x1, state)
    c2, _ = encode_content_with_tap(batch.x2, state)
    z1 = encode_private(batch.x1, enc1, state)
    z2 = encode_private(batch.x2, enc2, state)

    xhat1 = decode(c1, z1, state)
    xhat2 = decode(c2, z2, state)
    x1to2 = decode(c1, z2, state)
    x2to1 = decode(c2, z1, state)

    h1 = segment(c1, state)
    h2 = segment(c2, state)
    c1to2, tap1to2 = encode_content_with_tap(x1to2, state)
    h1to2 = segment(c1to2, state)

    rec = reconstruction_loss(batch.x1, xhat1, batch.x2, xhat2, extractor)
    trans = translation_loss(batch.x1, x1to2, batch.x2, x2to1, extractor)
    seg1 = segmentation_loss(h1, batch.y1)
    seg12 = segmentation_loss(h1to2, batch.y1)
    segadv, disc_loss = adversarial_losses(h2, h1, state.nets["discriminator"])

    aux = segmentation_loss(segment_aux(tap1, state), batch.y1) + segmentation_loss(
        segment_aux(tap1to2, state), batch.y1
    )

    total = (
        weights.lambda_rec * rec
        + weights.lambda_trans * trans
        + weights.lambda_seg * (seg1 + seg12)
        + weights.lambda_segadv * segadv
    )
    return FdnOutput(
        total=total,
        rec=rec,
        trans=trans,
        seg1=seg1,
        seg12=seg12,
        segadv=segadv,
        aux=aux,
        disc_loss=disc_loss,
    )
