"""Network components and the shared/private parameter bookkeeping.

One adaptation unit couples two domains and consists of:

* a shared content encoder ``E_c`` (domain-invariant spatial features),
* two private encoders (pooled domain-specific codes ``z``),
* a shared decoder ``D`` that renders an image from ``(c, z)``,
* a shared segmentation head ``S`` on top of content features,
* an auxiliary segmentation head on a shallower feature tap (used by the
  uncertainty probe),
* a shared discriminator on segmentation heatmaps for output-space
  alignment (channel 1 = "looks like the labeled domain").

:class:`NetworkState` owns all parameter groups, their freeze flags and the
current stage tag; every group is initialized from its own derived seed so
construction order never changes the parameters.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .errors import ConfigurationError, ShapeError
from .seeding import derive_seed

GROUPS = (
    "content_encoder",
    "decoder",
    "seg_head",
    "aux_head",
    "discriminator",
    "sty_s",
    "sty_m",
    "fog_m",
    "fog_t",
    "dual_s",
    "dual_t",
)

SHARED_GROUPS = ("content_encoder", "decoder", "seg_head", "aux_head", "discriminator")

PRIVATE_IDS = ("sty_s", "sty_m", "fog_m", "fog_t", "dual_s", "dual_t")

STAGE_ORDER = ("s2m", "m2t", "s2t")

# stage -> ((labeled-side domain, its private encoder), (other domain, encoder))
STAGE_PAIRS = {
    "s2m": (("s", "sty_s"), ("m", "sty_m")),
    "m2t": (("m", "fog_m"), ("t", "fog_t")),
    "s2t": (("s", "dual_s"), ("t", "dual_t")),
}

DOWNSAMPLE = 4


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(4, channels)


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        _gn(cout),
        nn.LeakyReLU(0.2, inplace=True),
    )


class ContentEncoder(nn.Module):
    """Shared content encoder: 4 conv blocks, stride 2 at blocks 1-2.

    ``forward`` maps ``(B, 3, H, W)`` to ``(B, d_c, H/4, W/4)``;
    ``forward_with_tap`` additionally returns the block-2 output, the
    shallower feature used by the auxiliary head.
    """

    def __init__(self, base_channels: int, d_c: int):
        super().__init__()
        b = base_channels
        self.block1 = _conv_block(3, b, stride=2)
        self.block2 = _conv_block(b, 2 * b, stride=2)
        self.block3 = _conv_block(2 * b, 2 * b)
        self.block4 = _conv_block(2 * b, d_c)

    def forward_with_tap(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        tap = self.block2(self.block1(x))
        return self.block4(self.block3(tap)), tap

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_tap(x)[0]


class PrivateEncoder(nn.Module):
    """Domain-private encoder: 3 conv blocks then global average pooling.

    Produces the pooled private code ``z`` of dimension ``d_z``.
    """

    def __init__(self, base_channels: int, d_z: int):
        super().__init__()
        b = base_channels
        self.blocks = nn.Sequential(
            _conv_block(3, b // 2 if b >= 8 else b, stride=2),
            _conv_block(b // 2 if b >= 8 else b, b, stride=2),
            nn.Conv2d(b, d_z, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).mean(dim=(2, 3))


class _AdaBlock(nn.Module):
    """Decoder block: conv -> parameter-free GroupNorm -> FiLM from z -> LeakyReLU."""

    def __init__(self, cin: int, cout: int, d_z: int, upsample: bool = False):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = nn.GroupNorm(4, cout, affine=False)
        self.film = nn.Linear(d_z, 2 * cout)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        x = self.norm(self.conv(x))
        scale, shift = self.film(z).chunk(2, dim=1)
        x = x * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return self.act(x)


class Decoder(nn.Module):
    """Shared decoder rendering an image from content ``c`` and private ``z``.

    The private code enters through FiLM modulation of every block, so the
    same content decodes to different appearances under different ``z``.
    Output passes through a sigmoid and lies in (0, 1).
    """

    def __init__(self, base_channels: int, d_c: int, d_z: int):
        super().__init__()
        b = base_channels
        self.blocks = nn.ModuleList(
            [
                _AdaBlock(d_c, 2 * b, d_z),
                _AdaBlock(2 * b, 2 * b, d_z, upsample=True),
                _AdaBlock(2 * b, b, d_z, upsample=True),
                _AdaBlock(b, b, d_z),
            ]
        )
        self.out = nn.Conv2d(b, 3, 3, padding=1)

    def forward(self, c: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        x = c
        for block in self.blocks:
            x = block(x, z)
        return torch.sigmoid(self.out(x))


class SegHead(nn.Module):
    """Segmentation head: 2 convs on content features, x4 bilinear upsample,
    softmax over classes."""

    def __init__(self, d_c: int, num_classes: int):
        super().__init__()
        self.body = nn.Sequential(_conv_block(d_c, d_c), nn.Conv2d(d_c, num_classes, 3, padding=1))

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        logits = self.body(c)
        logits = nn.functional.interpolate(
            logits, scale_factor=DOWNSAMPLE, mode="bilinear", align_corners=False
        )
        return torch.softmax(logits, dim=1)


class AuxHead(nn.Module):
    """Auxiliary segmentation head on the shallow feature tap (one conv)."""

    def __init__(self, tap_channels: int, num_classes: int):
        super().__init__()
        self.conv = nn.Conv2d(tap_channels, num_classes, 3, padding=1)

    def forward(self, tap: torch.Tensor) -> torch.Tensor:
        logits = nn.functional.interpolate(
            self.conv(tap), scale_factor=DOWNSAMPLE, mode="bilinear", align_corners=False
        )
        return torch.softmax(logits, dim=1)


class Discriminator(nn.Module):
    """Output-space discriminator on segmentation heatmaps.

    Four stride-2 convolutions map an ``(B, C, H, W)`` probability field to a
    two-channel map, softmax-normalized per position: channel 1 is the
    probability that the heatmap comes from the labeled (source-like) side,
    channel 0 from the unlabeled side.
    """

    def __init__(self, num_classes: int, base_channels: int):
        super().__init__()
        b = base_channels
        self.body = nn.Sequential(
            nn.Conv2d(num_classes, b, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(b, 2 * b, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * b, 2 * b, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * b, 2, 4, stride=2, padding=1),
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.body(h), dim=1)


# ---------------------------------------------------------------------------
# network state
# ---------------------------------------------------------------------------


@dataclass
class NetworkState:
    """All parameter groups plus freeze flags and the current stage tag."""

    nets: dict
    frozen: set
    stage: str
    seed: int
    model: ModelConfig
    num_classes: int
    extra: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, model: ModelConfig, num_classes: int, seed: int) -> "NetworkState":
        """Build all groups, each from its own derived init seed."""
        model.validate()
        if num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        nets = {}
        for name in GROUPS:
            torch.manual_seed(derive_seed(seed, "init", name))
            nets[name] = _build_group(name, model, num_classes)
        return cls(
            nets=nets,
            frozen=set(),
            stage=STAGE_ORDER[0],
            seed=seed,
            model=model,
            num_classes=num_classes,
        )

    def reinit_private(self, name: str, salt: str) -> None:
        """Freshly re-initialize one private encoder (used at stage hand-off)."""
        if name not in PRIVATE_IDS:
            raise ConfigurationError(f"cannot reinit non-private group {name!r}")
        torch.manual_seed(derive_seed(self.seed, "reinit", salt, name))
        self.nets[name] = _build_group(name, self.model, self.num_classes)

    def set_frozen(self, names) -> None:
        names = set(names)
        unknown = names - set(GROUPS)
        if unknown:
            raise ConfigurationError(f"unknown parameter groups: {sorted(unknown)}")
        self.frozen = names
        for group, net in self.nets.items():
            net.requires_grad_(group not in names)

    def parameters_of(self, names) -> list:
        params = []
        for name in names:
            if name not in self.nets:
                raise ConfigurationError(f"unknown parameter group {name!r}")
            params.extend(self.nets[name].parameters())
        return params

    def group_hash(self, name: str) -> str:
        """SHA-256 over the group's parameters and buffers, order-stable."""
        if name not in self.nets:
            raise ConfigurationError(f"unknown parameter group {name!r}")
        h = hashlib.sha256()
        sd = self.nets[name].state_dict()
        for key in sorted(sd.keys()):
            h.update(key.encode("utf-8"))
            h.update(sd[key].detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def clone(self) -> "NetworkState":
        return copy.deepcopy(self)

    def train_mode(self) -> None:
        for net in self.nets.values():
            net.train()

    def eval_mode(self) -> None:
        for net in self.nets.values():
            net.eval()


def _build_group(name: str, model: ModelConfig, num_classes: int) -> nn.Module:
    b, d_c, d_z = model.base_channels, model.d_c, model.d_z
    if name == "content_encoder":
        return ContentEncoder(b, d_c)
    if name == "decoder":
        return Decoder(b, d_c, d_z)
    if name == "seg_head":
        return SegHead(d_c, num_classes)
    if name == "aux_head":
        return AuxHead(2 * b, num_classes)
    if name == "discriminator":
        return Discriminator(num_classes, b)
    if name in PRIVATE_IDS:
        return PrivateEncoder(b, d_z)
    raise ConfigurationError(f"unknown parameter group {name!r}")


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------


def _check_image_batch(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, H, W) image batch, got {tuple(x.shape)}")
    if x.shape[2] % DOWNSAMPLE or x.shape[3] % DOWNSAMPLE:
        raise ShapeError(
            f"image dims must be divisible by {DOWNSAMPLE}, got {tuple(x.shape[2:])}"
        )


def encode_content(x: torch.Tensor, state: NetworkState) -> torch.Tensor:
    """Shared content encoding: (B, 3, H, W) -> (B, d_c, H/4, W/4)."""
    _check_image_batch(x)
    return state.nets["content_encoder"](x)


def encode_content_with_tap(x: torch.Tensor, state: NetworkState):
    _check_image_batch(x)
    return state.nets["content_encoder"].forward_with_tap(x)


def encode_private(x: torch.Tensor, encoder_id: str, state: NetworkState) -> torch.Tensor:
    """Private encoding through one of the six private encoders -> (B, d_z)."""
    if encoder_id not in PRIVATE_IDS:
        raise ConfigurationError(
            f"unknown private encoder {encoder_id!r}; expected one of {PRIVATE_IDS}"
        )
    _check_image_batch(x)
    return state.nets[encoder_id](x)


def decode(c: torch.Tensor, z: torch.Tensor, state: NetworkState) -> torch.Tensor:
    """Render an image batch from content and private features."""
    if c.dim() != 4 or c.shape[1] != state.model.d_c:
        raise ShapeError(
            f"expected content features (B, {state.model.d_c}, H', W'), got {tuple(c.shape)}"
        )
    if z.dim() != 2 or z.shape[1] != state.model.d_z:
        raise ShapeError(
            f"expected private features (B, {state.model.d_z}), got {tuple(z.shape)}"
        )
    if c.shape[0] != z.shape[0]:
        raise ShapeError(f"batch mismatch: content {c.shape[0]} vs private {z.shape[0]}")
    return state.nets["decoder"](c, z)


def segment(c: torch.Tensor, state: NetworkState) -> torch.Tensor:
    """Segmentation heatmap (B, C, H, W) from content features, softmaxed."""
    if c.dim() != 4 or c.shape[1] != state.model.d_c:
        raise ShapeError(
            f"expected content features (B, {state.model.d_c}, H', W'), got {tuple(c.shape)}"
        )
    return state.nets["seg_head"](c)


def segment_aux(tap: torch.Tensor, state: NetworkState) -> torch.Tensor:
    """Auxiliary heatmap from the shallow feature tap."""
    if "aux_head" not in state.nets:
        raise ConfigurationError("network state has no auxiliary head")
    return state.nets["aux_head"](tap)


def image_batch(images: np.ndarray) -> torch.Tensor:
    """Convert (N, H, W, 3) float numpy images to a (N, 3, H, W) tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (N, H, W, 3) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
