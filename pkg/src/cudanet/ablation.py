"""Experiment orchestrators: the pipeline ablation and the gap-decomposition
motivation experiment, both pure functions of (config, output directory)."""

from __future__ import annotations

import dataclasses
import logging
import time
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, canonical_json, config_hash, run_id
from .cumulative import run_cyclic_training
from .decomposition import (
    run_decomposition,
    stage_checkpoint_path,
    train_source_only,
    train_stage,
)
from .errors import DataError
from .evaluation import evaluate
from .losses import PerceptualExtractor
from .networks import NetworkState, STAGE_ORDER
from .synth import DatasetManifest, build_tridomain_dataset, load_split
from .uncertainty import GapReport, gap_report

logger = logging.getLogger(__name__)

ABLATION_ARMS = ("source_only", "s2m", "s2m_m2t", "decomp", "cyclic_nocum", "cyclic_full")


def ensure_dataset(cfg: ExperimentConfig) -> DatasetManifest:
    """Load the config's dataset, generating it first if absent."""
    root = cfg.dataset_root()
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        manifest = DatasetManifest.load(manifest_path)
        from .synth import _dataset_config_dict

        if manifest.config != _dataset_config_dict(cfg.dataset):
            raise DataError(
                f"dataset at {root} was generated from a different dataset config; "
                f"delete it or point dataset.root elsewhere"
            )
        return manifest
    logger.info("generating dataset under %s", root)
    return build_tridomain_dataset(
        cfg.dataset,
        root,
        meta={"config_hash": config_hash(cfg), "run_id": run_id(cfg, "synth")},
    )


def with_lambda_cum(cfg: ExperimentConfig, lam: float) -> ExperimentConfig:
    cyclic = dataclasses.replace(cfg.train.cyclic, lambda_cum=lam)
    train = dataclasses.replace(cfg.train, cyclic=cyclic)
    return dataclasses.replace(cfg, train=train)


def train_baseline(
    cfg: ExperimentConfig, manifest: DatasetManifest, out_dir: Path
) -> NetworkState:
    """Source-only baseline; checkpointed as ``source_only.ckpt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "source_only.ckpt"
    if ckpt.exists():
        state, _ = load_checkpoint(ckpt, cfg)
        return state
    split_s = load_split(manifest, "s")
    state = NetworkState.initialize(cfg.model, cfg.dataset.num_classes, cfg.seed)
    train_source_only(
        state,
        split_s.images,
        split_s.labels,
        cfg.train.source_only,
        aux_weight=cfg.train.aux_weight,
        seed=cfg.seed,
        log_path=out_dir / "train_source_only.jsonl",
        out_dir=out_dir,
    )
    save_checkpoint(ckpt, state, cfg)
    return state


def run_ablation(cfg: ExperimentConfig, out_root: Path) -> dict:
    """Train and evaluate every pipeline arm on the target domain.

    Arms: source-only baseline; the three cumulative stage prefixes of the
    decomposition; cyclic training without the triangle loss; and the full
    pipeline.  Returns a dict with one target mIoU per arm plus timing, and
    writes ``ablation_report.json`` and a bar plot.
    """
    from .plots import plot_ablation

    t0 = time.monotonic()
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    manifest = ensure_dataset(cfg)

    results: dict = {}

    base_dir = out_root / "baseline"
    base_state = train_baseline(cfg, manifest, base_dir)
    results["source_only"] = evaluate(base_state, manifest, "t").miou
    results["source_only_on_s"] = evaluate(base_state, manifest, "s").miou

    decomp_dir = out_root / "decomp"
    run_decomposition(manifest, cfg, decomp_dir)
    for stage, arm in zip(STAGE_ORDER, ("s2m", "s2m_m2t", "decomp")):
        state, _ = load_checkpoint(stage_checkpoint_path(decomp_dir, stage), cfg)
        results[arm] = evaluate(state, manifest, "t").miou

    for arm, lam in (("cyclic_nocum", 0.0), ("cyclic_full", cfg.train.cyclic.lambda_cum)):
        arm_cfg = with_lambda_cum(cfg, lam)
        arm_dir = out_root / arm
        state, _ = load_checkpoint(stage_checkpoint_path(decomp_dir, "s2t"), arm_cfg)
        run_cyclic_training(state, manifest, arm_cfg, arm_dir)
        state, _ = load_checkpoint(arm_dir / "final.ckpt", arm_cfg)
        results[arm] = evaluate(state, manifest, "t").miou

    elapsed = time.monotonic() - t0
    report = {
        "arms": {k: results[k] for k in (*ABLATION_ARMS, "source_only_on_s")},
        "elapsed_seconds": elapsed,
        "config_hash": config_hash(cfg),
        "run_id": run_id(cfg, "ablation"),
    }
    (out_root / "ablation_report.json").write_text(canonical_json(report))
    plot_ablation({k: results[k] for k in ABLATION_ARMS}, out_root / "ablation.png")
    results["elapsed_seconds"] = elapsed
    results["out_root"] = out_root
    logger.info("ablation finished in %.1fs: %s", elapsed, report["arms"])
    return results


def run_motivation(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Gap decomposition before and after style adaptation.

    Trains the source-only model, reports its gaps, adapts it with the
    intermediate domain (the s2m stage) and reports again.  Returns the two
    reports plus timing; writes them as JSON next to a comparison plot.
    """
    from .plots import plot_gap_reports

    t0 = time.monotonic()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = ensure_dataset(cfg)

    state = train_baseline(cfg, manifest, out_dir)
    meta = {"config_hash": config_hash(cfg), "run_id": run_id(cfg, "motivation")}
    before = gap_report(
        state, manifest, model_tag="source_only", dataset_tag="tri-domain", meta=meta
    )
    before.save(out_dir / "gap_report_before.json")

    split_s = load_split(manifest, "s")
    split_m = load_split(manifest, "m")
    extractor = PerceptualExtractor.fixed_random(cfg.seed)
    train_stage(
        ("s", "m"),
        state,
        split_s.labels,
        cfg.train.s2m,
        data={"s": split_s.images, "m": split_m.images},
        weights=cfg.loss_weights,
        extractor=extractor,
        seed=cfg.seed,
        aux_weight=cfg.train.aux_weight,
        log_path=out_dir / "train_s2m.jsonl",
        out_dir=out_dir,
    )
    after = gap_report(
        state, manifest, model_tag="adapted_s2m", dataset_tag="tri-domain", meta=meta
    )
    after.save(out_dir / "gap_report_after.json")
    plot_gap_reports([before, after], out_dir / "gap_report.png")

    elapsed = time.monotonic() - t0
    logger.info(
        "motivation finished in %.1fs: style %.4f -> %.4f, fog %.4f -> %.4f",
        elapsed,
        before.gap_style,
        after.gap_style,
        before.gap_fog,
        after.gap_fog,
    )
    return {
        "before": before,
        "after": after,
        "elapsed_seconds": elapsed,
        "out_dir": out_dir,
    }
