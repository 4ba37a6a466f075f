"""Per-image uncertainty probe and the style/fog/dual gap decomposition.

The probe scores one image by the disagreement between the main
segmentation head and the auxiliary head attached to a shallower feature
tap: the mean squared difference of their softmax outputs over pixels and
classes.  Averaging over a dataset gives the mean variance value (MVV), and
MVV differences between domains decompose the overall domain gap:

* style gap = MVV(m) - MVV(s)
* fog gap   = MVV(t) - MVV(m)
* dual gap  = style gap + fog gap  (telescoping identity, exact)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError, DataError, ShapeError
from .networks import (
    NetworkState,
    encode_content_with_tap,
    image_batch,
    segment,
    segment_aux,
)
from .synth import DatasetManifest, load_split


def heatmap_disagreement(h_main: torch.Tensor, h_aux: torch.Tensor) -> float:
    """Mean over pixels and classes of the squared softmax difference."""
    if h_main.shape != h_aux.shape:
        raise ShapeError(
            f"heatmap shapes differ: {tuple(h_main.shape)} vs {tuple(h_aux.shape)}"
        )
    return float(((h_main - h_aux) ** 2).mean())


def _disagreements(state: NetworkState, images: np.ndarray) -> np.ndarray:
    if "aux_head" not in state.nets:
        raise ConfigurationError("uncertainty probe requires the auxiliary head")
    state.eval_mode()
    values = []
    with torch.no_grad():
        # One image per forward pass: per-image values must not depend on how
        # the dataset happens to be batched, or permutation invariance breaks.
        for i in range(images.shape[0]):
            x = image_batch(images[i : i + 1])
            c, tap = encode_content_with_tap(x, state)
            h = segment(c, state)
            ha = segment_aux(tap, state)
            values.append(float(((h - ha) ** 2).mean()))
    return np.asarray(values, dtype=np.float64)


def variance_value(state: NetworkState, image: np.ndarray) -> float:
    """Uncertainty of a single image: disagreement between the two heads."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image[None]
    return float(_disagreements(state, image)[0])


def mvv(state: NetworkState, images: np.ndarray) -> float:
    """Mean variance value: arithmetic mean of per-image uncertainties."""
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise DataError("MVV undefined for an empty dataset")
    # Fixed summation order keeps the mean deterministic and order-independent.
    return float(np.sort(_disagreements(state, images), kind="stable").mean())


@dataclass
class GapReport:
    """MVV per domain plus the derived style/fog/dual gaps."""

    model: str
    dataset: str
    mvv_s: float
    mvv_m: float
    mvv_t: float
    gap_style: float
    gap_fog: float
    gap_dual: float
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_mvv(cls, model: str, dataset: str, mvv_s: float, mvv_m: float,
                 mvv_t: float, meta: Optional[dict] = None) -> "GapReport":
        gap_style = mvv_m - mvv_s
        gap_fog = mvv_t - mvv_m
        # Built as the sum so the telescoping identity holds exactly.
        gap_dual = gap_style + gap_fog
        return cls(
            model=model,
            dataset=dataset,
            mvv_s=mvv_s,
            mvv_m=mvv_m,
            mvv_t=mvv_t,
            gap_style=gap_style,
            gap_fog=gap_fog,
            gap_dual=gap_dual,
            meta=meta or {},
        )

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "dataset": self.dataset,
            "mvv": {"s": self.mvv_s, "m": self.mvv_m, "t": self.mvv_t},
            "gaps": {"style": self.gap_style, "fog": self.gap_fog, "dual": self.gap_dual},
            "meta": self.meta,
        }

    def save(self, path: Path) -> Path:
        from .config import canonical_json

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(canonical_json(self.to_dict()))
        return path

    @classmethod
    def load(cls, path: Path) -> "GapReport":
        import json

        path = Path(path)
        if not path.exists():
            raise DataError(f"gap report not found: {path}")
        data = json.loads(path.read_text())
        try:
            return cls(
                model=data["model"],
                dataset=data["dataset"],
                mvv_s=data["mvv"]["s"],
                mvv_m=data["mvv"]["m"],
                mvv_t=data["mvv"]["t"],
                gap_style=data["gaps"]["style"],
                gap_fog=data["gaps"]["fog"],
                gap_dual=data["gaps"]["dual"],
                meta=data.get("meta", {}),
            )
        except KeyError as exc:
            raise DataError(f"gap report {path} missing key {exc}") from exc


def gap_report(
    state: NetworkState,
    manifest: DatasetManifest,
    *,
    model_tag: str = "model",
    dataset_tag: str = "tri-domain",
    meta: Optional[dict] = None,
) -> GapReport:
    """Measure MVV on all three domain splits and derive the gaps."""
    values = {}
    for domain in ("s", "m", "t"):
        try:
            split = load_split(manifest, domain, allow_hidden=True)
        except DataError as exc:
            raise DataError(f"gap report needs split '{domain}': {exc}") from exc
        values[domain] = mvv(state, split.images)
    return GapReport.from_mvv(
        model_tag, dataset_tag, values["s"], values["m"], values["t"], meta=meta
    )
