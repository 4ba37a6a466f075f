"""Command-line interface.

Subcommands
-----------

synth       generate the tri-domain dataset under the configured root
train       run training (``--phase decomp``, ``cyclic`` or ``all``)
eval        evaluate a checkpoint on one split, write ``eval_report.json``
gap-report  write the domain-gap decomposition for a checkpoint
defog       reconstruct fog-free versions of every target image
plot        render loss curves / gap bars / ablation bars from run artifacts

Every subcommand takes ``--config`` plus optional ``--set key.path=value``
overrides, ``--seed`` and ``--out``; the effective config is written next to
the outputs it produced.  Exit codes: 0 ok, 2 config/usage, 3 data,
4 numerical, 5 missing prerequisite or pipeline-order violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import ensure_dataset
from .checkpoint import load_checkpoint
from .config import (
    ExperimentConfig,
    canonical_json,
    config_hash,
    load_config,
    run_id,
    save_yaml,
)
from .cumulative import run_cyclic_training
from .decomposition import run_decomposition, stage_checkpoint_path
from .errors import CudanetError, MissingPrerequisiteError
from .evaluation import evaluate, psnr
from .synth import (
    build_tridomain_dataset,
    load_split,
    render_clear,
    save_image_png,
    to_uint8,
)
from .uncertainty import GapReport, gap_report

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument(
        "--set",
        dest="sets",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config entry, e.g. --set train.cyclic.metric=l1",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out", default=None, help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cudanet")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the tri-domain dataset")
    _add_common(p)

    p = sub.add_parser("train", help="run training")
    _add_common(p)
    p.add_argument(
        "--phase",
        choices=("decomp", "cyclic", "all"),
        default="all",
        help="which part of the pipeline to run",
    )
    p.add_argument(
        "--lambda-cum",
        type=float,
        default=None,
        help="shortcut for --set train.cyclic.lambda_cum=...",
    )
    p.add_argument(
        "--no-resume",
        action="store_true",
        help="ignore existing checkpoints in the output directory",
    )

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("s", "m", "t"), default="t")

    p = sub.add_parser("gap-report", help="write the domain-gap decomposition")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-tag", default=None, help="label stored in the report")

    p = sub.add_parser("defog", help="reconstruct fog-free target images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("plot", help="render plots from run artifacts")
    _add_common(p)
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    sets = list(args.sets)
    if getattr(args, "lambda_cum", None) is not None:
        sets.append(f"train.cyclic.lambda_cum={args.lambda_cum}")
    return load_config(args.config, sets=sets, seed=args.seed, out_dir=args.out)


def _write_effective_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_yaml(cfg, out_dir / "effective_config.yaml")


def _require_manifest(cfg: ExperimentConfig) -> Path:
    path = cfg.dataset_root() / "manifest.json"
    if not path.exists():
        raise MissingPrerequisiteError(
            f"no dataset manifest at {path}; run `cudanet synth` first"
        )
    return path


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load(args)
    root = cfg.dataset_root()
    build_tridomain_dataset(
        cfg.dataset,
        root,
        meta={"config_hash": config_hash(cfg), "run_id": run_id(cfg, "synth")},
    )
    _write_effective_config(cfg, root)
    print(f"dataset written to {root}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out_dir = Path(cfg.out_dir)
    _require_manifest(cfg)
    manifest = ensure_dataset(cfg)
    _write_effective_config(cfg, out_dir)
    resume = not args.no_resume

    state = None
    if args.phase in ("decomp", "all"):
        state = run_decomposition(manifest, cfg, out_dir, resume=resume)
    if args.phase in ("cyclic", "all"):
        if state is None:
            ckpt = stage_checkpoint_path(out_dir, "s2t")
            if not ckpt.exists():
                raise MissingPrerequisiteError(
                    f"cyclic training needs {ckpt}; run `cudanet train --phase decomp` first"
                )
            state, _ = load_checkpoint(ckpt, cfg)
        state = run_cyclic_training(state, manifest, cfg, out_dir, resume=resume)
    report = evaluate(
        state,
        manifest,
        "t",
        meta={"config_hash": config_hash(cfg), "run_id": run_id(cfg, "train")},
    )
    report.save(out_dir / "eval_report.json")
    print(f"final target mIoU: {report.miou:.6f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out_dir = Path(cfg.out_dir)
    manifest_path = _require_manifest(cfg)
    from .synth import DatasetManifest

    manifest = DatasetManifest.load(manifest_path)
    state, _ = load_checkpoint(args.checkpoint, cfg)
    report = evaluate(
        state,
        manifest,
        args.split,
        meta={
            "config_hash": config_hash(cfg),
            "run_id": run_id(cfg, "eval"),
            "checkpoint": str(args.checkpoint),
        },
    )
    _write_effective_config(cfg, out_dir)
    report.save(out_dir / "eval_report.json")
    print(f"{args.split} mIoU: {report.miou:.6f}")
    for name, iou in report.per_class.items():
        print(f"  {name}: {iou:.6f}" if not np.isnan(iou) else f"  {name}: n/a")
    return 0


def cmd_gap_report(args: argparse.Namespace) -> int:
    from .plots import plot_gap_reports

    cfg = _load(args)
    out_dir = Path(cfg.out_dir)
    manifest_path = _require_manifest(cfg)
    from .synth import DatasetManifest

    manifest = DatasetManifest.load(manifest_path)
    state, _ = load_checkpoint(args.checkpoint, cfg)
    tag = args.model_tag or Path(args.checkpoint).stem
    report = gap_report(
        state,
        manifest,
        model_tag=tag,
        dataset_tag=Path(manifest.root).name,
        meta={
            "config_hash": config_hash(cfg),
            "run_id": run_id(cfg, "gap-report"),
            "checkpoint": str(args.checkpoint),
        },
    )
    _write_effective_config(cfg, out_dir)
    report.save(out_dir / "gap_report.json")
    plot_gap_reports([report], out_dir / "gap_report.png")
    print(
        f"gaps for {tag}: style={report.gap_style:.6f} "
        f"fog={report.gap_fog:.6f} dual={report.gap_dual:.6f}"
    )
    return 0


def cmd_defog(args: argparse.Namespace) -> int:
    import torch

    from .synth import DatasetManifest

    cfg = _load(args)
    out_dir = Path(cfg.out_dir)
    manifest = DatasetManifest.load(_require_manifest(cfg))
    state, _ = load_checkpoint(args.checkpoint, cfg)
    state.eval_mode()

    split_m = load_split(manifest, "m")
    split_t = load_split(manifest, "t")
    defog_dir = out_dir / "defog"
    defog_dir.mkdir(parents=True, exist_ok=True)
    _write_effective_config(cfg, out_dir)

    from .networks import decode, encode_content, encode_private, image_batch

    with torch.no_grad():
        z_clear = encode_private(image_batch(split_m.images), "fog_m", state)
        z_clear = z_clear.mean(dim=0, keepdim=True)
        rows = []
        for i, entry in enumerate(manifest.entries_for("t")):
            x = image_batch(split_t.images[i : i + 1])
            restored = decode(encode_content(x, state), z_clear, state)
            restored_np = restored[0].permute(1, 2, 0).numpy()
            name = Path(entry["image"]).name
            save_image_png(defog_dir / name, restored_np)
            clear, _ = render_clear(cfg.dataset, "t", entry["seed"])
            rows.append(
                {
                    "image": name,
                    "psnr_foggy": float(psnr(split_t.images[i], clear)),
                    "psnr_defogged": float(psnr(restored_np, clear)),
                }
            )
    improved = int(sum(r["psnr_defogged"] > r["psnr_foggy"] for r in rows))
    report = {
        "images": rows,
        "improved": improved,
        "total": len(rows),
        "config_hash": config_hash(cfg),
        "run_id": run_id(cfg, "defog"),
        "checkpoint": str(args.checkpoint),
    }
    (out_dir / "defog_report.json").write_text(canonical_json(report))
    print(f"defogged {len(rows)} images -> {defog_dir} (PSNR improved on {improved})")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    import json

    from .plots import plot_ablation, plot_gap_reports, plot_training_curves

    cfg = _load(args)
    out_dir = Path(cfg.out_dir)
    made = []
    logs = sorted(out_dir.glob("train_*.jsonl"))
    if logs:
        plot_training_curves(logs, out_dir / "loss_curves.png")
        made.append("loss_curves.png")
    gap_path = out_dir / "gap_report.json"
    if gap_path.exists():
        plot_gap_reports([GapReport.load(gap_path)], out_dir / "gap_report.png")
        made.append("gap_report.png")
    abl_path = out_dir / "ablation_report.json"
    if abl_path.exists():
        arms = json.loads(abl_path.read_text())["arms"]
        arms = {k: v for k, v in arms.items() if k != "source_only_on_s"}
        plot_ablation(arms, out_dir / "ablation.png")
        made.append("ablation.png")
    if not made:
        raise MissingPrerequisiteError(f"nothing to plot under {out_dir}")
    print(f"wrote {', '.join(made)} in {out_dir}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gap-report": cmd_gap_report,
    "defog": cmd_defog,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except CudanetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def entrypoint() -> None:  # console_scripts target
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
