"""Synthetic data generator: scenes, styles, fog, dataset layout."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cudanet.config import DatasetConfig, FogParams, LayoutParams, StyleParams
from cudanet.errors import ConfigurationError, DataError
from cudanet.synth import (
    DatasetManifest,
    IGNORE_ID,
    SceneSpec,
    apply_fog,
    apply_style,
    build_tridomain_dataset,
    depth_map,
    from_uint8,
    generate_scene,
    load_split,
    render_clear,
    render_domain,
    scene_spec_for,
    to_uint8,
    transmission,
)

LAYOUT = LayoutParams()


def small_spec(seed, h=24, w=24):
    return SceneSpec(seed=seed, height=h, width=w, num_classes=5, layout=LAYOUT)


@given(seed=st.integers(min_value=0, max_value=2**31))
@settings(max_examples=25, deadline=None)
def test_scene_invariants(seed):
    image, labels = generate_scene(small_spec(seed))
    assert image.shape == (24, 24, 3) and image.dtype == np.float32
    assert labels.shape == (24, 24) and labels.dtype == np.uint8
    assert image.min() >= 0.0 and image.max() <= 1.0
    assert labels.min() >= 0 and labels.max() < 5
    # sky above road: topmost row is sky, bottom row is road or an object
    assert (labels[0] == 0).all()


def test_scene_deterministic():
    a = generate_scene(small_spec(123))
    b = generate_scene(small_spec(123))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    c = generate_scene(small_spec(124))
    assert not np.array_equal(a[0], c[0])


def test_identity_style_is_noop():
    image, _ = generate_scene(small_spec(7))
    out = apply_style(image, StyleParams())
    assert np.array_equal(out, image)


def test_style_changes_image_and_stays_in_range():
    image, _ = generate_scene(small_spec(7))
    style = StyleParams(
        channel_gain=(1.2, 0.9, 0.7),
        channel_bias=(0.06, 0.0, -0.04),
        gamma=1.3,
        hue_rotation=1.1,
    )
    out = apply_style(image, style)
    assert out.shape == image.shape
    assert not np.array_equal(out, image)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_hue_rotation_full_turn_matches_identity():
    image, _ = generate_scene(small_spec(11))
    out = apply_style(image, StyleParams(hue_rotation=2.0 * np.pi))
    assert np.allclose(out, np.clip(image, 0.0, 1.0), atol=1e-6)


def test_depth_map_monotone_and_offsets():
    fog = FogParams(class_depth_offsets=(0.5, 0.0, 0.2, 0.2, 0.2))
    labels = np.ones((10, 4), dtype=np.uint8)  # all road, offset 0
    d = depth_map(fog, 10, 4, labels)
    # top rows are farther than bottom rows
    col = d[:, 0]
    assert (np.diff(col) < 0).all()
    assert col.min() >= fog.depth_near and col.max() <= fog.depth_far
    labels_sky = np.zeros((10, 4), dtype=np.uint8)
    assert np.allclose(depth_map(fog, 10, 4, labels_sky) - d, 0.5)


def test_negative_depth_rejected():
    fog = FogParams(depth_near=0.1, class_depth_offsets=(-0.2, 0.0, 0.0, 0.0, 0.0))
    labels = np.zeros((4, 4), dtype=np.uint8)
    with pytest.raises(ConfigurationError):
        depth_map(fog, 4, 4, labels)


def test_fog_oracle_koschmieder():
    """apply_fog must equal the literal scattering equation, element-wise."""
    rng = np.random.default_rng(0)
    image = rng.random((12, 12, 3), dtype=np.float32)
    labels = rng.integers(0, 5, size=(12, 12)).astype(np.uint8)
    fog = FogParams(beta=1.7, airlight=(0.9, 0.92, 0.95))
    out = apply_fog(image, fog, labels)
    d = depth_map(fog, 12, 12, labels)
    t = np.exp(-fog.beta * d)[..., None]
    expected = image * t + np.asarray(fog.airlight, dtype=np.float32) * (1.0 - t)
    assert np.allclose(out, expected, atol=1e-6)
    # fog pulls every pixel toward the airlight, never past it
    assert ((out - image) * (np.asarray(fog.airlight) - image) >= -1e-6).all()


def test_transmission_range():
    fog = FogParams(beta=2.0)
    labels = np.ones((8, 8), dtype=np.uint8)
    t = transmission(fog, 8, 8, labels)
    assert (t > 0).all() and (t < 1).all()


def test_target_is_fog_of_intermediate_rendering():
    """Matched seeds: t differs from m exactly by the fog operator."""
    cfg = DatasetConfig()
    seed = 90210
    m_img, m_lbl = render_clear(cfg, "t", seed)
    t_img, t_lbl = render_domain(cfg, "t", seed)
    assert np.array_equal(m_lbl, t_lbl)
    assert np.array_equal(t_img, apply_fog(m_img, cfg.fog_t, m_lbl))
    # and the clear t rendering is the m rendering of the same seed
    assert np.array_equal(m_img, render_domain(cfg, "m", seed)[0])


def test_uint8_roundtrip():
    rng = np.random.default_rng(3)
    image = rng.random((6, 6, 3), dtype=np.float32)
    q = from_uint8(to_uint8(image))
    assert np.abs(q - image).max() <= 0.5 / 255.0 + 1e-7


def test_build_dataset_layout_and_reload(tmp_path):
    cfg = DatasetConfig(counts={"s": 3, "m": 2, "t": 3})
    manifest = build_tridomain_dataset(cfg, tmp_path)
    assert (tmp_path / "manifest.json").exists()
    assert (tmp_path / "s" / "img" / "0000.png").exists()
    assert (tmp_path / "s" / "lbl" / "0000.png").exists()
    assert (tmp_path / "m" / "img" / "0001.png").exists()
    assert (tmp_path / "t" / "lbl_hidden" / "0002.png").exists()
    assert not (tmp_path / "t" / "lbl").exists()
    again = DatasetManifest.load(tmp_path / "manifest.json")
    assert again.counts == manifest.counts
    assert again.entries == manifest.entries


def test_hidden_labels_stay_hidden(tmp_path):
    cfg = DatasetConfig(counts={"s": 2, "m": 2, "t": 2})
    manifest = build_tridomain_dataset(cfg, tmp_path)
    assert load_split(manifest, "m").labels is None
    assert load_split(manifest, "t").labels is None
    assert load_split(manifest, "s").labels is not None
    t_eval = load_split(manifest, "t", allow_hidden=True)
    assert t_eval.labels is not None and t_eval.labels.shape == (2, 32, 32)
    assert IGNORE_ID not in np.unique(t_eval.labels)


def test_split_images_match_renderings(tmp_path):
    """PNG roundtrip only quantizes; content comes from the pure renderer."""
    cfg = DatasetConfig(counts={"s": 2, "m": 1, "t": 1})
    manifest = build_tridomain_dataset(cfg, tmp_path)
    split = load_split(manifest, "s")
    entry = manifest.entries_for("s")[0]
    fresh, _ = render_domain(cfg, "s", entry["seed"])
    assert np.array_equal(split.images[0], from_uint8(to_uint8(fresh)))


def test_overlapping_seed_ranges_rejected():
    with pytest.raises(ConfigurationError):
        DatasetConfig(
            counts={"s": 100, "m": 100, "t": 100},
            seed_starts={"s": 0, "m": 50, "t": 1000},
        ).validate()


def test_scene_spec_for_uses_dataset_dims():
    cfg = DatasetConfig(height=48, width=36)
    spec = scene_spec_for(cfg, 5)
    assert (spec.height, spec.width) == (48, 36)
    assert spec.num_classes == cfg.num_classes


def test_manifest_rejects_public_target_labels(tmp_path):
    cfg = DatasetConfig(counts={"s": 1, "m": 1, "t": 1})
    manifest = build_tridomain_dataset(cfg, tmp_path)
    bad = dataclasses.replace(manifest)
    bad.entries = [dict(e) for e in manifest.entries]
    for e in bad.entries:
        if e["domain"] == "t":
            e["label_hidden"] = False
    with pytest.raises(DataError):
        bad.validate()
