"""Stage-wise training: style unit, fog unit, dual unit, with shared-part
hand-off and pseudo-label generation for the intermediate domain.

Stages run strictly in the order s2m -> m2t -> s2t.  After each stage the
shared parts (content encoder, decoder, segmentation heads, discriminator)
carry over to the next unit while that unit's private encoder pair is
freshly initialized; previously trained private encoders are retained for
the cyclical phase.  The labeled side of s2m and s2t uses true source
labels; the labeled side of m2t uses pseudo labels predicted by the trained
style unit — hidden ground truth for m and t is never read here.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import ExperimentConfig, StageConfig
from .errors import ConfigurationError, NumericalError, PipelineError
from .losses import FdnBatch, PerceptualExtractor, fdn_loss, segmentation_loss
from .networks import (
    GROUPS,
    NetworkState,
    PRIVATE_IDS,
    STAGE_ORDER,
    STAGE_PAIRS,
    encode_content,
    encode_content_with_tap,
    image_batch,
    segment,
    segment_aux,
)
from .seeding import derive_seed
from .synth import IGNORE_ID, DatasetManifest, load_split

logger = logging.getLogger(__name__)

GEN_SHARED = ("content_encoder", "decoder", "seg_head", "aux_head")


def _pair_tag(pair) -> str:
    for tag, ((a, _), (b, _)) in STAGE_PAIRS.items():
        if tuple(pair) == (a, b):
            return tag
    raise ConfigurationError(f"unknown domain pair {tuple(pair)!r}")


class StepLogger:
    """Line-delimited JSON training log ({step, loss components, lr})."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


def _poly_lr(base: float, step: int, total: int, power: float) -> float:
    return base * max(1.0 - step / max(total, 1), 0.0) ** power


def _make_optimizer(params, cfg: StageConfig, lr: float):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum)


def _set_lr(opt, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _check_finite(value: torch.Tensor, stage: str, step: int,
                  record: dict, out_dir: Optional[Path]) -> None:
    if bool(torch.isfinite(value).all()):
        return
    if out_dir:
        dump = Path(out_dir) / f"diagnostic_{stage}.json"
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(json.dumps({"stage": stage, "step": step, "record": record}, indent=2))
    raise NumericalError(f"non-finite loss in stage {stage} at step {step}: {record}")


def train_stage(
    pair,
    state: NetworkState,
    labels_a: Optional[np.ndarray],
    cfg: StageConfig,
    *,
    data: dict,
    weights,
    extractor: PerceptualExtractor,
    seed: int,
    aux_weight: float = 0.0,
    log_path: Optional[Path] = None,
    out_dir: Optional[Path] = None,
    step_callback: Optional[Callable] = None,
) -> NetworkState:
    """Optimize one adaptation unit on its domain pair.

    Args:
        pair: (domain_a, domain_b); domain_a is the labeled side.
        state: Network state; mutated in place and returned.
        labels_a: Label maps for domain_a (true or pseudo). Required.
        cfg: Stage optimization settings.
        data: domain -> float images (N, H, W, 3).
        weights: Loss weights for the combined objective.
        extractor: Fixed perceptual stack.
        seed: Experiment seed; the stage's data order derives from it.
        aux_weight: Weight of the auxiliary-head cross-entropy, added to the
            generator objective (not part of the combined loss itself).
        log_path: Optional JSONL training-log path.
        out_dir: Where to drop a diagnostic dump if the loss goes non-finite.
        step_callback: Called as f(state, stage_tag, step) after each step.
    """
    stage = _pair_tag(pair)
    dom_a, dom_b = pair
    if labels_a is None:
        raise PipelineError(f"stage {stage} requires labels for domain '{dom_a}'")
    cfg.validate(f"train.{stage}")

    (_, enc1), (_, enc2) = STAGE_PAIRS[stage]
    frozen = set(PRIVATE_IDS) - {enc1, enc2}
    state.set_frozen(frozen)
    state.train_mode()

    x_a = image_batch(data[dom_a])
    x_b = image_batch(data[dom_b])
    y_a = torch.from_numpy(np.asarray(labels_a)).long()

    gen_groups = list(GEN_SHARED) + [enc1, enc2]
    gen_opt = _make_optimizer(state.parameters_of(gen_groups), cfg, cfg.lr)
    disc_opt = _make_optimizer(state.parameters_of(["discriminator"]), cfg, cfg.lr_disc)

    rng = np.random.default_rng(derive_seed(seed, "data", stage))
    log = StepLogger(log_path)

    for step in range(cfg.steps):
        lr = _poly_lr(cfg.lr, step, cfg.steps, cfg.poly_power)
        _set_lr(gen_opt, lr)
        _set_lr(disc_opt, _poly_lr(cfg.lr_disc, step, cfg.steps, cfg.poly_power))

        ia = rng.integers(0, x_a.shape[0], size=cfg.batch_size)
        ib = rng.integers(0, x_b.shape[0], size=cfg.batch_size)
        batch = FdnBatch(x1=x_a[ia], y1=y_a[ia], x2=x_b[ib], pair=stage)

        out = fdn_loss(batch, weights, extractor, state)
        gen_total = out.total + aux_weight * out.aux

        record = {"step": step, **out.component_floats(), "lr": lr}
        _check_finite(gen_total, stage, step, record, out_dir)
        _check_finite(out.disc_loss, stage, step, record, out_dir)

        gen_opt.zero_grad()
        gen_total.backward()
        gen_opt.step()

        disc_opt.zero_grad()
        out.disc_loss.backward()
        disc_opt.step()

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.write(record)
        if step_callback is not None:
            step_callback(state, stage, step)

    state.extra["optimizer"] = {"gen": gen_opt.state_dict(), "disc": disc_opt.state_dict()}
    return state


def train_source_only(
    state: NetworkState,
    images_s: np.ndarray,
    labels_s: np.ndarray,
    cfg: StageConfig,
    *,
    aux_weight: float = 0.0,
    seed: int = 0,
    log_path: Optional[Path] = None,
    out_dir: Optional[Path] = None,
) -> NetworkState:
    """Baseline: fit content encoder + heads on labeled source images only."""
    cfg.validate("train.source_only")
    frozen = set(PRIVATE_IDS) | {"decoder", "discriminator"}
    state.set_frozen(frozen)
    state.train_mode()

    x_s = image_batch(images_s)
    y_s = torch.from_numpy(np.asarray(labels_s)).long()
    opt = _make_optimizer(
        state.parameters_of(["content_encoder", "seg_head", "aux_head"]), cfg, cfg.lr
    )
    rng = np.random.default_rng(derive_seed(seed, "data", "source_only"))
    log = StepLogger(log_path)

    for step in range(cfg.steps):
        lr = _poly_lr(cfg.lr, step, cfg.steps, cfg.poly_power)
        _set_lr(opt, lr)
        idx = rng.integers(0, x_s.shape[0], size=cfg.batch_size)
        c, tap = encode_content_with_tap(x_s[idx], state)
        seg = segmentation_loss(segment(c, state), y_s[idx])
        aux = segmentation_loss(segment_aux(tap, state), y_s[idx])
        loss = seg + aux_weight * aux
        record = {
            "step": step,
            "loss": float(loss.detach()),
            "seg": float(seg.detach()),
            "aux": float(aux.detach()),
            "lr": lr,
        }
        _check_finite(loss, "source_only", step, record, out_dir)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.write(record)
    state.extra["optimizer"] = {"gen": opt.state_dict()}
    return state


def generate_pseudo_labels(
    state: NetworkState, images: np.ndarray, threshold: Optional[float]
) -> np.ndarray:
    """Predict label maps; below-threshold pixels become the ignore id.

    ``threshold=None`` keeps the plain argmax everywhere.
    """
    if threshold is not None and not (0.0 <= threshold <= 1.0):
        raise ConfigurationError(f"pseudo_label_threshold must be in [0, 1], got {threshold}")
    images = np.asarray(images)
    if images.shape[0] == 0:
        return np.zeros((0,) + images.shape[1:3], dtype=np.int64)
    state.eval_mode()
    outputs = []
    with torch.no_grad():
        for lo in range(0, images.shape[0], 16):
            x = image_batch(images[lo : lo + 16])
            h = segment(encode_content(x, state), state)
            conf, pred = h.max(dim=1)
            pred = pred.long()
            if threshold is not None:
                pred = torch.where(
                    conf >= threshold, pred, torch.full_like(pred, IGNORE_ID)
                )
            outputs.append(pred.numpy())
    state.train_mode()
    return np.concatenate(outputs, axis=0).astype(np.int64)


_NEXT_STAGE = {"s2m": "m2t", "m2t": "s2t"}


def transfer_shared(from_state: NetworkState, to_stage: str) -> NetworkState:
    """Hand shared parts to the next unit; its private pair starts fresh.

    The content encoder, decoder, segmentation heads and discriminator are
    copied; the private encoders of ``to_stage`` are re-initialized from
    fresh derived seeds; all other private encoders are retained.
    """
    if to_stage not in STAGE_ORDER:
        raise ConfigurationError(f"unknown stage {to_stage!r}")
    if _NEXT_STAGE.get(from_state.stage) != to_stage:
        raise PipelineError(
            f"stage ordering violated: cannot transfer from {from_state.stage!r} "
            f"to {to_stage!r} (order is {' -> '.join(STAGE_ORDER)})"
        )
    new_state = from_state.clone()
    new_state.stage = to_stage
    for _, enc in STAGE_PAIRS[to_stage]:
        new_state.reinit_private(enc, salt=to_stage)
    new_state.set_frozen(set())
    return new_state


def stage_checkpoint_path(out_dir: Path, stage: str) -> Path:
    return Path(out_dir) / f"stage_{stage}.ckpt"


def run_decomposition(
    manifest: DatasetManifest,
    cfg: ExperimentConfig,
    out_dir: Path,
    *,
    resume: bool = True,
    step_callback: Optional[Callable] = None,
) -> NetworkState:
    """Run the full stage-wise pipeline, checkpointing after every stage.

    With ``resume=True`` the longest existing prefix of stage checkpoints in
    ``out_dir`` is loaded instead of retrained; because every stage reseeds
    its data order from (seed, stage), a resumed run continues with exactly
    the loss curve of an uninterrupted one.
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extractor = PerceptualExtractor.fixed_random(cfg.seed)

    split_s = load_split(manifest, "s")
    split_m = load_split(manifest, "m")
    split_t = load_split(manifest, "t")
    data = {"s": split_s.images, "m": split_m.images, "t": split_t.images}

    start = 0
    state: Optional[NetworkState] = None
    if resume:
        for i in reversed(range(len(STAGE_ORDER))):
            path = stage_checkpoint_path(out_dir, STAGE_ORDER[i])
            if path.exists():
                state, _ = load_checkpoint(path, cfg)
                start = i + 1
                logger.info("resuming after stage %s from %s", STAGE_ORDER[i], path)
                break
    if state is None:
        state = NetworkState.initialize(cfg.model, cfg.dataset.num_classes, cfg.seed)

    for stage in STAGE_ORDER[start:]:
        stage_cfg = cfg.train.stage(stage)
        if stage == "s2m":
            labels = split_s.labels
        elif stage == "m2t":
            labels = generate_pseudo_labels(
                state, data["m"], stage_cfg.pseudo_label_threshold
            )
            state = transfer_shared(state, stage)
        else:  # s2t
            labels = split_s.labels
            state = transfer_shared(state, stage)
        pair = tuple(d for (d, _) in STAGE_PAIRS[stage])
        logger.info("training stage %s (%d steps)", stage, stage_cfg.steps)
        try:
            train_stage(
                pair,
                state,
                labels,
                stage_cfg,
                data=data,
                weights=cfg.loss_weights,
                extractor=extractor,
                seed=cfg.seed,
                aux_weight=cfg.train.aux_weight,
                log_path=out_dir / f"train_{stage}.jsonl",
                out_dir=out_dir,
                step_callback=step_callback,
            )
        except NumericalError as exc:
            raise NumericalError(f"stage {stage}: {exc}") from exc
        save_checkpoint(stage_checkpoint_path(out_dir, stage), state, cfg)

    return state
