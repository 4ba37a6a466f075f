"""Procedural tri-domain dataset: clear/labeled source, style-shifted
intermediate, and foggy target sharing the intermediate's style.

The generator draws simple road scenes (sky, road, buildings, vegetation,
vehicles) and derives the three domains from disjoint scene-seed ranges:

* domain ``s``: clear scenes with the base style, labels public;
* domain ``m``: clear scenes with a shifted style, labels stored but hidden;
* domain ``t``: the ``m`` rendering pipeline plus transmission fog, labels
  stored under ``lbl_hidden`` and hidden.

Because ``t`` is literally ``apply_fog`` composed onto the ``m`` pipeline,
the m<->t gap is fog-only and the s<->m gap is style-only by construction.
All randomness comes from per-scene seeds, so generation is a pure function
of the dataset config and is safe to parallelize per scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage

from .config import CLASS_NAMES, DOMAINS, DatasetConfig, LayoutParams, StyleParams, FogParams
from .errors import ConfigurationError, DataError

IGNORE_ID = 255

# Base palette, one RGB row per class id (sky, road, building, vegetation, vehicle).
_PALETTE = np.array(
    [
        [0.55, 0.70, 0.92],
        [0.42, 0.42, 0.45],
        [0.55, 0.35, 0.30],
        [0.20, 0.50, 0.25],
        [0.75, 0.15, 0.15],
    ],
    dtype=np.float32,
)

_VEHICLE_COLORS = np.array(
    [[0.75, 0.15, 0.15], [0.20, 0.30, 0.70], [0.80, 0.80, 0.82]], dtype=np.float32
)

_HUE_AXIS = np.ones(3) / math.sqrt(3.0)


@dataclass
class SceneSpec:
    """Full description of one procedural scene.

    Attributes:
        seed: Scene seed; identical specs render bit-identical scenes.
        height: Image height in pixels (>= 16).
        width: Image width in pixels (>= 16).
        num_classes: Number of classes drawn, in [2, 5]; classes are taken
            in the fixed order sky, road, building, vegetation, vehicle.
        layout: Distribution parameters for shape placement.
    """

    seed: int
    height: int = 32
    width: int = 32
    num_classes: int = 5
    layout: LayoutParams = field(default_factory=LayoutParams)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render one clear scene and its label map.

    Args:
        spec: Scene description; all randomness derives from ``spec.seed``.

    Returns:
        Tuple ``(image, labels)`` where ``image`` is float32 ``(H, W, 3)``
        in [0, 1] and ``labels`` is uint8 ``(H, W)`` with ids in
        ``[0, spec.num_classes)``.

    Raises:
        ConfigurationError: If dimensions are below 16x16 or the class count
            is outside [2, 5].
    """
    if spec.height < 16 or spec.width < 16:
        raise ConfigurationError(
            f"scene dimensions must be >= 16x16, got {spec.height}x{spec.width}"
        )
    if not (2 <= spec.num_classes <= len(CLASS_NAMES)):
        raise ConfigurationError(
            f"num_classes must be in [2, {len(CLASS_NAMES)}], got {spec.num_classes}"
        )
    lay = spec.layout
    h, w, n_cls = spec.height, spec.width, spec.num_classes
    rng = np.random.default_rng(spec.seed)

    horizon = int(round(h * rng.uniform(lay.horizon_low, lay.horizon_high)))
    horizon = min(max(horizon, 2), h - 4)

    jitter = rng.normal(0.0, 0.03, size=(len(CLASS_NAMES), 3)).astype(np.float32)
    palette = np.clip(_PALETTE + jitter, 0.0, 1.0)

    image = np.zeros((h, w, 3), dtype=np.float32)
    labels = np.full((h, w), 1, dtype=np.uint8)  # road below the horizon
    labels[:horizon] = 0  # sky above

    # Sky: brightens toward the horizon line.
    sky_fade = np.linspace(0.0, 1.0, horizon, dtype=np.float32)[:, None, None]
    image[:horizon] = palette[0] * (0.92 + 0.08 * sky_fade)
    # Road: darkens slightly toward the bottom edge.
    road_fade = np.linspace(0.0, 1.0, h - horizon, dtype=np.float32)[:, None, None]
    image[horizon:] = palette[1] * (1.0 - 0.12 * road_fade)

    if n_cls >= 3 and lay.max_buildings > 0:
        n_buildings = int(rng.integers(1, lay.max_buildings + 1))
        for _ in range(n_buildings):
            bw = max(2, int(rng.uniform(0.10, 0.28) * w))
            bh = max(3, int(rng.uniform(0.25, 0.65) * horizon))
            x0 = int(rng.integers(0, max(1, w - bw)))
            y0 = horizon - bh
            shade = rng.uniform(0.8, 1.2)
            image[y0:horizon, x0 : x0 + bw] = np.clip(palette[2] * shade, 0.0, 1.0)
            labels[y0:horizon, x0 : x0 + bw] = 2

    if n_cls >= 4 and lay.vegetation_patches > 0:
        n_patches = int(rng.integers(1, lay.vegetation_patches + 1))
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(n_patches):
            cx = rng.uniform(0.0, w)
            cy = rng.uniform(horizon * 0.55, horizon)
            rx = rng.uniform(0.06, 0.16) * w
            ry = rng.uniform(0.12, 0.3) * horizon
            shade = rng.uniform(0.8, 1.2)
            mask = ((xx - cx) / max(rx, 1.0)) ** 2 + ((yy - cy) / max(ry, 1.0)) ** 2 <= 1.0
            mask &= yy < horizon
            image[mask] = np.clip(palette[3] * shade, 0.0, 1.0)
            labels[mask] = 3

    if n_cls >= 5 and lay.max_vehicles > 0:
        n_vehicles = int(rng.integers(1, lay.max_vehicles + 1))
        for _ in range(n_vehicles):
            cy = int(rng.integers(horizon + 1, h - 2))
            depth_frac = (cy - horizon) / max(h - horizon, 1)  # 0 far, 1 near
            vw = max(2, int((0.08 + 0.14 * depth_frac) * w))
            vh = max(2, int(0.5 * vw))
            x0 = int(rng.integers(0, max(1, w - vw)))
            y0 = max(horizon, cy - vh)
            color = _VEHICLE_COLORS[int(rng.integers(0, len(_VEHICLE_COLORS)))]
            shade = rng.uniform(0.85, 1.15)
            image[y0:cy, x0 : x0 + vw] = np.clip(color * shade, 0.0, 1.0)
            labels[y0:cy, x0 : x0 + vw] = 4

    if lay.noise_std > 0:
        image = image + rng.normal(0.0, lay.noise_std, size=image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, labels


def _hue_rotation_matrix(theta: float) -> np.ndarray:
    """Rodrigues rotation by ``theta`` radians about the gray diagonal."""
    u = _HUE_AXIS
    k = np.array(
        [[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]], dtype=np.float64
    )
    return (
        math.cos(theta) * np.eye(3)
        + math.sin(theta) * k
        + (1.0 - math.cos(theta)) * np.outer(u, u)
    )


def apply_style(image: np.ndarray, params: StyleParams) -> np.ndarray:
    """Apply the photometric style transform gain -> bias -> gamma -> hue.

    Identity parameters return the input exactly (each sub-step is skipped
    when its parameter equals the identity value). Output is clamped to
    [0, 1]; label maps are never touched by styling.

    Args:
        image: Float array ``(H, W, 3)`` with values in [0, 1].
        params: Style parameters; must be finite.

    Returns:
        Styled image, same shape and dtype float32, values in [0, 1].

    Raises:
        ConfigurationError: If any parameter is non-finite or gamma <= 0.
    """
    params.validate()
    out = np.asarray(image, dtype=np.float32)
    gain = np.asarray(params.channel_gain, dtype=np.float32)
    bias = np.asarray(params.channel_bias, dtype=np.float32)
    if not np.all(gain == 1.0):
        out = out * gain
    if not np.all(bias == 0.0):
        out = out + bias
    out = np.maximum(out, 0.0)
    if params.gamma != 1.0:
        out = out ** np.float32(params.gamma)
    if params.hue_rotation != 0.0:
        rot = _hue_rotation_matrix(params.hue_rotation).astype(np.float32)
        out = out @ rot.T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def depth_map(fog: FogParams, height: int, width: int,
              labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-pixel scene depth: linear in row (far at the top) plus class offsets.

    Raises:
        ConfigurationError: If the resulting depth is not positive everywhere.
    """
    rows = np.linspace(fog.depth_far, fog.depth_near, height, dtype=np.float64)
    depth = np.repeat(rows[:, None], width, axis=1)
    if labels is not None:
        offsets = np.asarray(fog.class_depth_offsets, dtype=np.float64)
        if labels.shape != (height, width):
            raise ConfigurationError("labels shape does not match the image for depth lookup")
        if int(labels.max(initial=0)) >= len(offsets):
            raise ConfigurationError(
                "class_depth_offsets has no entry for some label id in the scene"
            )
        depth = depth + offsets[labels]
    if depth.min() <= 0:
        raise ConfigurationError(
            f"depth model must yield d(x) > 0 everywhere; min was {depth.min():.4g}"
        )
    return depth


def transmission(fog: FogParams, height: int, width: int,
                 labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Transmission map t(x) = exp(-beta * d(x)), in (0, 1]."""
    fog.validate()
    return np.exp(-fog.beta * depth_map(fog, height, width, labels))


def apply_fog(image: np.ndarray, fog: FogParams,
              labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Composite transmission fog over a clear image.

    Implements ``I = J * t + A * (1 - t)`` with ``t = exp(-beta * d)``.
    ``beta = 0`` reproduces the input exactly.

    Args:
        image: Clear image ``(H, W, 3)`` in [0, 1].
        fog: Fog parameters (validated; ``beta < 0`` is rejected).
        labels: Optional label map used for per-class depth offsets.

    Returns:
        Foggy image, float32, clamped to [0, 1].
    """
    fog.validate()
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ConfigurationError(f"apply_fog expects an (H, W, 3) image, got {img.shape}")
    t = transmission(fog, img.shape[0], img.shape[1], labels).astype(np.float32)[..., None]
    airlight = np.asarray(fog.airlight, dtype=np.float32)
    out = img * t + airlight * (1.0 - t)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# domain renderers
# ---------------------------------------------------------------------------


def scene_spec_for(cfg: DatasetConfig, seed: int) -> SceneSpec:
    return SceneSpec(
        seed=seed,
        height=cfg.height,
        width=cfg.width,
        num_classes=cfg.num_classes,
        layout=cfg.layout,
    )


def render_clear(cfg: DatasetConfig, domain: str, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render the clear (fog-free) image of ``seed`` in ``domain``'s style.

    For domain ``t`` this is the defog ground truth: the same scene in the
    shared m/t style but without fog.
    """
    if domain not in DOMAINS:
        raise ConfigurationError(f"unknown domain {domain!r}")
    image, labels = generate_scene(scene_spec_for(cfg, seed))
    style = cfg.style_s if domain == "s" else cfg.style_m
    return apply_style(image, style), labels


def render_domain(cfg: DatasetConfig, domain: str, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render the final dataset image for ``seed`` in ``domain``.

    Domain ``t`` is exactly the ``m`` rendering with fog composited on top,
    so matched seeds differ only through :func:`apply_fog`.
    """
    image, labels = render_clear(cfg, domain, seed)
    if domain == "t":
        image = apply_fog(image, cfg.fog_t, labels)
    return image, labels


# ---------------------------------------------------------------------------
# PNG + manifest I/O
# ---------------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / 255.0


def save_image_png(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(image), mode="RGB").save(path)


def save_label_png(path: Path, labels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_image_png(path: Path) -> np.ndarray:
    if not Path(path).exists():
        raise DataError(f"image file missing: {path}")
    return from_uint8(np.asarray(PILImage.open(path).convert("RGB")))


def load_label_png(path: Path) -> np.ndarray:
    if not Path(path).exists():
        raise DataError(f"label file missing: {path}")
    return np.asarray(PILImage.open(path)).astype(np.int64)


@dataclass
class DatasetManifest:
    """On-disk dataset description.

    ``entries`` holds dicts with keys ``domain``, ``seed``, ``image``,
    ``label`` and ``label_hidden``; paths are relative to ``root``. Hidden
    labels exist for the unlabeled domains (m, t) but may only be read by
    evaluation code, never by training.
    """

    root: Path
    counts: dict
    entries: list
    config: dict
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        by_domain = {d: [e for e in self.entries if e["domain"] == d] for d in DOMAINS}
        for d in DOMAINS:
            if self.counts.get(d) != len(by_domain[d]):
                raise DataError(
                    f"manifest counts mismatch for domain '{d}': "
                    f"{self.counts.get(d)} != {len(by_domain[d])}"
                )
        for e in self.entries:
            if e["domain"] == "s" and (e.get("label") is None or e.get("label_hidden")):
                raise DataError("every s-entry must carry a public label")
            if e["domain"] in ("m", "t") and not e.get("label_hidden"):
                raise DataError(f"{e['domain']}-entry labels must be flagged hidden")

    def entries_for(self, domain: str) -> list:
        if domain not in DOMAINS:
            raise ConfigurationError(f"unknown domain {domain!r}")
        return [e for e in self.entries if e["domain"] == domain]

    def to_dict(self) -> dict:
        return {
            "root": str(self.root),
            "counts": dict(self.counts),
            "entries": list(self.entries),
            "config": self.config,
            "meta": self.meta,
        }

    def save(self, path: Optional[Path] = None) -> Path:
        from .config import canonical_json

        self.validate()
        path = Path(path) if path else Path(self.root) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(canonical_json(self.to_dict()))
        return path

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        import json

        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
        try:
            manifest = cls(
                root=Path(data["root"]),
                counts=data["counts"],
                entries=data["entries"],
                config=data.get("config", {}),
                meta=data.get("meta", {}),
            )
        except KeyError as exc:
            raise DataError(f"manifest {path} missing key {exc}") from exc
        manifest.validate()
        return manifest


def build_tridomain_dataset(cfg: DatasetConfig, root: Path,
                            meta: Optional[dict] = None) -> DatasetManifest:
    """Generate and write the full three-domain dataset.

    Scene seeds are ``seed_starts[d] + i`` for entry ``i`` of domain ``d``;
    the config validator guarantees the three ranges are disjoint, so no
    scene ever appears in two domains.

    Args:
        cfg: Dataset configuration (validated here).
        root: Output directory; the layout is ``<root>/{s,m,t}/img/NNNN.png``
            with labels under ``lbl/`` (s, m) or ``lbl_hidden/`` (t).
        meta: Optional provenance (config hash, run id) echoed in the manifest.

    Returns:
        The written :class:`DatasetManifest`.
    """
    cfg.validate()
    root = Path(root)
    entries = []
    for domain in DOMAINS:
        for i in range(cfg.counts[domain]):
            seed = cfg.seed_starts[domain] + i
            image, labels = render_domain(cfg, domain, seed)
            img_rel = f"{domain}/img/{i:04d}.png"
            lbl_dir = "lbl_hidden" if domain == "t" else "lbl"
            lbl_rel = f"{domain}/{lbl_dir}/{i:04d}.png"
            save_image_png(root / img_rel, image)
            save_label_png(root / lbl_rel, labels)
            entries.append(
                {
                    "domain": domain,
                    "seed": seed,
                    "image": img_rel,
                    "label": lbl_rel,
                    "label_hidden": domain != "s",
                }
            )
    manifest = DatasetManifest(
        root=root,
        counts={d: cfg.counts[d] for d in DOMAINS},
        entries=entries,
        config=_dataset_config_dict(cfg),
        meta=meta or {},
    )
    manifest.save()
    return manifest


def _dataset_config_dict(cfg: DatasetConfig) -> dict:
    import dataclasses

    from .config import _to_plain

    return _to_plain(dataclasses.asdict(cfg))


@dataclass
class SplitData:
    """One domain split loaded into memory.

    ``labels`` is ``None`` when the split's labels are hidden and the caller
    did not (and may not) request them.
    """

    domain: str
    images: np.ndarray  # (N, H, W, 3) float32
    labels: Optional[np.ndarray]  # (N, H, W) int64 or None
    seeds: list


def load_split(manifest: DatasetManifest, domain: str, *,
               allow_hidden: bool = False) -> SplitData:
    """Load one domain split.

    Training code must call this with the default ``allow_hidden=False``:
    hidden labels (domains m and t) are then withheld and ``labels`` is
    ``None``.  Only evaluation and reporting may pass ``allow_hidden=True``.
    """
    entries = manifest.entries_for(domain)
    if not entries:
        raise DataError(f"split '{domain}' is empty")
    images = np.stack([load_image_png(Path(manifest.root) / e["image"]) for e in entries])
    labels = None
    visible = [not e["label_hidden"] for e in entries]
    if all(visible) or allow_hidden:
        labels = np.stack([load_label_png(Path(manifest.root) / e["label"]) for e in entries])
    return SplitData(
        domain=domain,
        images=images.astype(np.float32),
        labels=labels,
        seeds=[e["seed"] for e in entries],
    )
