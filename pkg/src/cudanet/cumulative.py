"""Cumulative triangle loss over private-feature distances and the
cyclical freeze-scheduled training loop.

The style, fog and dual private codes of one scene triple should satisfy an
additive relationship: the style distance (m vs s) plus the fog distance
(t vs m) should equal the dual distance (t vs s).  The cumulative loss is
the squared residual of that triangle equality, built from scalar distances
(per-sample distance, batch mean).  Cyclical training repeats three steps T
times — style, fog, dual — each optimizing its unit's pair loss plus the
weighted cumulative loss while the other two private-encoder pairs stay
frozen; the shared content encoder trains in every step, and pseudo labels
for the intermediate domain are refreshed from the current content encoder
at the start of every fog step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import ExperimentConfig
from .errors import ConfigurationError, NumericalError, PipelineError, ShapeError
from .decomposition import (
    GEN_SHARED,
    StepLogger,
    _check_finite,
    _make_optimizer,
    _poly_lr,
    _set_lr,
    generate_pseudo_labels,
)
from .losses import FdnBatch, FdnOutput, PerceptualExtractor, fdn_loss
from .networks import (
    NetworkState,
    PRIVATE_IDS,
    STAGE_PAIRS,
    encode_private,
    image_batch,
)
from .seeding import derive_seed
from .synth import DatasetManifest, load_split

logger = logging.getLogger(__name__)

METRICS = ("l1", "l2", "cosine")

PHASES = ("style", "fog", "dual")

PHASE_PAIR = {"style": "s2m", "fog": "m2t", "dual": "s2t"}

PHASE_FROZEN = {
    "style": {"fog_m", "fog_t", "dual_s", "dual_t"},
    "fog": {"sty_s", "sty_m", "dual_s", "dual_t"},
    "dual": {"sty_s", "sty_m", "fog_m", "fog_t"},
}


def private_distance(za: torch.Tensor, zb: torch.Tensor, metric: str) -> torch.Tensor:
    """Scalar domain discrepancy: per-sample distance, then batch mean."""
    if metric not in METRICS:
        raise ConfigurationError(f"unknown distance metric {metric!r}; expected {METRICS}")
    if za.dim() == 1:
        za = za.unsqueeze(0)
    if zb.dim() == 1:
        zb = zb.unsqueeze(0)
    if za.shape != zb.shape:
        raise ShapeError(f"private feature shapes differ: {tuple(za.shape)} vs {tuple(zb.shape)}")
    if metric == "l1":
        dist = (za - zb).abs().sum(dim=1)
    elif metric == "l2":
        dist = torch.linalg.vector_norm(za - zb, dim=1)
    else:  # cosine
        na = torch.linalg.vector_norm(za, dim=1)
        nb = torch.linalg.vector_norm(zb, dim=1)
        if bool((na == 0).any()) or bool((nb == 0).any()):
            raise NumericalError("cosine distance undefined for zero vectors")
        dist = 1.0 - (za * zb).sum(dim=1) / (na * nb)
    return dist.mean()


def cumulative_residual(d_style, d_fog, d_dual):
    """Squared triangle residual (d_style + d_fog - d_dual)^2."""
    return (d_style + d_fog - d_dual) ** 2


def cumulative_loss(z_style, z_fog, z_dual, metric: str) -> torch.Tensor:
    """Triangle loss over the three private-feature pairs.

    Args:
        z_style: (z of m through its style encoder, z of s through its style
            encoder) — the style pair.
        z_fog: (z of t, z of m) through the fog encoders.
        z_dual: (z of t, z of s) through the dual encoders.
        metric: 'l1', 'l2' or 'cosine'.
    """
    d_style = private_distance(z_style[0], z_style[1], metric)
    d_fog = private_distance(z_fog[0], z_fog[1], metric)
    d_dual = private_distance(z_dual[0], z_dual[1], metric)
    return cumulative_residual(d_style, d_fog, d_dual)


@dataclass
class CyclicBatch:
    """One aligned batch triple (x_s, x_m, x_t) plus the labeled-side labels."""

    x_s: torch.Tensor
    y_s: torch.Tensor
    x_m: torch.Tensor
    x_t: torch.Tensor
    pseudo_m: Optional[torch.Tensor] = None


@dataclass
class CyclicOutput:
    total: torch.Tensor
    pair: FdnOutput
    cum: torch.Tensor


def final_loss(
    step_kind: str,
    batch: CyclicBatch,
    state: NetworkState,
    cfg: ExperimentConfig,
    extractor: PerceptualExtractor,
) -> CyclicOutput:
    """Pair objective of the step's unit plus the weighted cumulative loss."""
    if step_kind not in PHASES:
        raise ConfigurationError(f"unknown cyclic step kind {step_kind!r}")
    if step_kind == "style":
        fdn_batch = FdnBatch(x1=batch.x_s, y1=batch.y_s, x2=batch.x_m, pair="s2m")
    elif step_kind == "fog":
        if batch.pseudo_m is None:
            raise PipelineError("fog step requires pseudo labels for domain m")
        fdn_batch = FdnBatch(x1=batch.x_m, y1=batch.pseudo_m, x2=batch.x_t, pair="m2t")
    else:
        fdn_batch = FdnBatch(x1=batch.x_s, y1=batch.y_s, x2=batch.x_t, pair="s2t")
    pair_out = fdn_loss(fdn_batch, cfg.loss_weights, extractor, state)

    z_s1 = encode_private(batch.x_s, "sty_s", state)
    z_m1 = encode_private(batch.x_m, "sty_m", state)
    z_m2 = encode_private(batch.x_m, "fog_m", state)
    z_t2 = encode_private(batch.x_t, "fog_t", state)
    z_s3 = encode_private(batch.x_s, "dual_s", state)
    z_t3 = encode_private(batch.x_t, "dual_t", state)
    cum = cumulative_loss((z_m1, z_s1), (z_t2, z_m2), (z_t3, z_s3), cfg.train.cyclic.metric)

    total = pair_out.total + cfg.train.cyclic.lambda_cum * cum
    return CyclicOutput(total=total, pair=pair_out, cum=cum)


def cycle_checkpoint_path(out_dir: Path, cycle: int, phase: str) -> Path:
    return Path(out_dir) / f"cycle_{cycle}_{phase}.ckpt"


def _verify_frozen(state: NetworkState, start_hashes: dict, cycle: int,
                   phase: str, step: int) -> None:
    for group, expected in start_hashes.items():
        actual = state.group_hash(group)
        if actual != expected:
            raise PipelineError(
                f"freeze schedule violated in cycle {cycle} {phase} step {step}: "
                f"group {group!r} changed while frozen"
            )


def run_cyclic_training(
    state: NetworkState,
    manifest: DatasetManifest,
    cfg: ExperimentConfig,
    out_dir: Path,
    *,
    resume: bool = True,
    step_callback: Optional[Callable] = None,
) -> NetworkState:
    """Run T cycles of style/fog/dual steps with the freeze schedule.

    The two inactive private-encoder pairs of each step are frozen and their
    parameter hashes verified every 50 steps plus first and last; any change
    aborts with a pipeline error.  Checkpoints land at
    ``cycle_{t}_{style,fog,dual}.ckpt`` and ``final.ckpt``.
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    if state.stage not in ("s2t", "cyclic"):
        raise PipelineError(
            f"cyclic training requires the completed stage pipeline; "
            f"state is at stage {state.stage!r}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cyc = cfg.train.cyclic
    extractor = PerceptualExtractor.fixed_random(cfg.seed)

    final_path = out_dir / "final.ckpt"
    if resume and final_path.exists():
        state, _ = load_checkpoint(final_path, cfg)
        logger.info("cyclic training already complete: %s", final_path)
        return state

    split_s = load_split(manifest, "s")
    split_m = load_split(manifest, "m")
    split_t = load_split(manifest, "t")
    x_s = image_batch(split_s.images)
    x_m = image_batch(split_m.images)
    x_t = image_batch(split_t.images)
    y_s = torch.from_numpy(split_s.labels).long()

    state.stage = "cyclic"

    # Resume from the last phase checkpoint, if any.
    todo = [(t, phase) for t in range(1, cyc.T + 1) for phase in PHASES]
    start_idx = 0
    if resume:
        for i in reversed(range(len(todo))):
            t, phase = todo[i]
            path = cycle_checkpoint_path(out_dir, t, phase)
            if path.exists():
                state, _ = load_checkpoint(path, cfg)
                start_idx = i + 1
                logger.info("resuming cyclic training after cycle %d %s", t, phase)
                break

    scfg = cyc.step
    for t, phase in todo[start_idx:]:
        pair_tag = PHASE_PAIR[phase]
        (_, enc1), (_, enc2) = STAGE_PAIRS[pair_tag]
        state.set_frozen(PHASE_FROZEN[phase])
        state.train_mode()

        pseudo_m_t: Optional[torch.Tensor] = None
        if phase == "fog":
            pseudo_m = generate_pseudo_labels(
                state, split_m.images, scfg.pseudo_label_threshold
            )
            pseudo_m_t = torch.from_numpy(pseudo_m).long()
            state.train_mode()

        gen_groups = list(GEN_SHARED) + [enc1, enc2]
        gen_opt = _make_optimizer(state.parameters_of(gen_groups), scfg, scfg.lr)
        disc_opt = _make_optimizer(
            state.parameters_of(["discriminator"]), scfg, scfg.lr_disc
        )
        rng = np.random.default_rng(derive_seed(cfg.seed, "data", "cyclic", t, phase))
        log = StepLogger(out_dir / f"train_cyclic_{t}_{phase}.jsonl")
        start_hashes = {g: state.group_hash(g) for g in PHASE_FROZEN[phase]}
        stage_name = f"cyclic_{t}_{phase}"

        for step in range(scfg.steps):
            lr = _poly_lr(scfg.lr, step, scfg.steps, scfg.poly_power)
            _set_lr(gen_opt, lr)
            _set_lr(disc_opt, _poly_lr(scfg.lr_disc, step, scfg.steps, scfg.poly_power))

            i_s = rng.integers(0, x_s.shape[0], size=scfg.batch_size)
            i_m = rng.integers(0, x_m.shape[0], size=scfg.batch_size)
            i_t = rng.integers(0, x_t.shape[0], size=scfg.batch_size)
            batch = CyclicBatch(
                x_s=x_s[i_s],
                y_s=y_s[i_s],
                x_m=x_m[i_m],
                x_t=x_t[i_t],
                pseudo_m=None if pseudo_m_t is None else pseudo_m_t[i_m],
            )
            out = final_loss(phase, batch, state, cfg, extractor)
            gen_total = out.total + cfg.train.aux_weight * out.pair.aux

            record = {
                "step": step,
                "cycle": t,
                "phase": phase,
                **out.pair.component_floats(),
                "cum": float(out.cum.detach()),
                "final": float(out.total.detach()),
                "lr": lr,
            }
            _check_finite(gen_total, stage_name, step, record, out_dir)
            _check_finite(out.pair.disc_loss, stage_name, step, record, out_dir)

            gen_opt.zero_grad()
            gen_total.backward()
            gen_opt.step()

            disc_opt.zero_grad()
            out.pair.disc_loss.backward()
            disc_opt.step()

            if step % scfg.log_every == 0 or step == scfg.steps - 1:
                log.write(record)
            if step == 0 or step % 50 == 0 or step == scfg.steps - 1:
                _verify_frozen(state, start_hashes, t, phase, step)
            if step_callback is not None:
                step_callback(state, stage_name, step)

        state.extra["optimizer"] = {
            "gen": gen_opt.state_dict(),
            "disc": disc_opt.state_dict(),
        }
        save_checkpoint(cycle_checkpoint_path(out_dir, t, phase), state, cfg)

    state.set_frozen(set())
    save_checkpoint(final_path, state, cfg)
    return state
