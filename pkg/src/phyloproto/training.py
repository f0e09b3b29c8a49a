"""Three-phase training schedule.

1. ``pretrain_epochs``: self-supervised only, ``lam_A * L_A + lam_T * L_T``.
2. ``main_epochs``: every loss at every node, with the masks learned alongside.
3. ``mask_epochs``: the rest of the model is frozen while the masks keep training.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses as L
from . import tape as T
from .config import ModelConfig
from .data import AugmentConfig, Dataset, augment_batch, make_batches
from .masking import gumbel_noise, mask_loss, overspecificity_score, relaxed_mask
from .model import Model, node_logits, pool_scores, prototype_scores
from .tape import AdamState, Tape, adam_step

log = logging.getLogger(__name__)

LOG_KEYS = {
    "ce": "L_CE",
    "align": "L_A",
    "tanh": "L_T",
    "ovsp": "L_ovsp",
    "disc": "L_disc",
    "orth": "L_orth",
    "mask": "L_mask",
    "total": "total",
}


@dataclass
class TrainingProgress:
    """Completed epochs, the phase they ended in, and that phase's optimizer state."""

    epoch: int = 0
    phase: str | None = None
    adam: AdamState = field(default_factory=AdamState)


def epoch_rngs(seed: int, epoch: int) -> tuple[np.random.Generator, ...]:
    """Batch order, augmentation and Gumbel noise streams for one epoch.

    Keyed on (seed, epoch) alone so a resumed run draws the same numbers.
    """
    seq = np.random.SeedSequence(seed, spawn_key=(epoch,))
    return tuple(np.random.default_rng(s) for s in seq.spawn(3))


def schedule(cfg: ModelConfig) -> list[str]:
    return ["pretrain"] * cfg.pretrain_epochs + ["main"] * cfg.main_epochs + ["mask"] * cfg.mask_epochs


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


def _views(model: Model, images: np.ndarray, rng: np.random.Generator, aug: AugmentConfig) -> np.ndarray:
    first, second = augment_batch(images, rng, aug)
    return np.concatenate([first, second])


def batch_losses(
    model: Model,
    views: np.ndarray,
    labels: np.ndarray,
    phase: str,
    noise_rng: np.random.Generator | None = None,
) -> tuple[L.LossBreakdown, dict[int, np.ndarray]]:
    """Build every loss for one batch of paired views on the active tape.

    ``views`` stacks the first views of all images above their second views.
    Presence-type losses are averaged over the two views; cross-entropy and
    the over-specificity score use both.
    """
    cfg = model.cfg
    lam = cfg.lambdas
    tree = model.tree
    B = len(labels)
    both = np.concatenate([labels, labels])
    Z = model.extract_features(views)
    out = L.LossBreakdown()
    scores: dict[int, np.ndarray] = {}
    targets = L.child_targets(tree, both) if phase == "main" else {}
    masks = []
    for node, head in model.heads.items():
        S = prototype_scores(head, Z)
        G = pool_scores(S)
        L.accumulate(out, "align", L.alignment_loss(T.narrow(S, 0, B), T.narrow(S, B, 2 * B)))
        G1, G2 = T.narrow(G, 0, B), T.narrow(G, B, 2 * B)
        L.accumulate(out, "tanh", T.scalar_mul(T.add(L.tanh_loss(G1), L.tanh_loss(G2)), 0.5))
        if phase != "main":
            continue
        ovsp = T.add(L.overspecificity_loss(G1, labels, head, tree), L.overspecificity_loss(G2, labels, head, tree))
        L.accumulate(out, "ovsp", T.scalar_mul(ovsp, 0.5))
        disc = T.add(L.discriminative_loss(G1, labels, head, tree), L.discriminative_loss(G2, labels, head, tree))
        L.accumulate(out, "disc", T.scalar_mul(disc, 0.5))
        L.accumulate(out, "orth", L.orthogonality_loss(head.prototypes))
        if node in targets:
            rows, tgt = targets[node]
            L.accumulate(out, "ce", L.node_cross_entropy(node_logits(head, G), rows, tgt, cfg.ce_reduction))
        O = overspecificity_score(G.data, both, head, tree)
        scores[node] = O
        noise = gumbel_noise(noise_rng, (head.K, 2)) if noise_rng is not None else None
        M = relaxed_mask(head.mask_logits, cfg.tau, noise)
        masks.append(mask_loss(M, O, lam["mask"], lam["l1"]))
    if masks:
        total_mask = masks[0]
        for m in masks[1:]:
            total_mask = T.add(total_mask, m)
        out.mask = total_mask
    weights = lam if phase == "main" else {**{k: 0.0 for k in lam}, "align": lam["align"], "tanh": lam["tanh"]}
    L.combined_loss(out, weights)
    return out, scores


def mask_only_losses(model: Model, views: np.ndarray, labels: np.ndarray, noise_rng=None) -> tuple[T.Tensor, dict]:
    """Mask loss with the rest of the model evaluated as constants."""
    cfg = model.cfg
    both = np.concatenate([labels, labels])
    with T.no_record():
        outs = model.forward(views)
    total = None
    scores = {}
    for node, head in model.heads.items():
        O = overspecificity_score(outs[node].pooled.data, both, head, model.tree)
        scores[node] = O
        noise = gumbel_noise(noise_rng, (head.K, 2)) if noise_rng is not None else None
        m = mask_loss(relaxed_mask(head.mask_logits, cfg.tau, noise), O, cfg.lambdas["mask"], cfg.lambdas["l1"])
        total = m if total is None else T.add(total, m)
    return total, scores


def _param_groups(model: Model, phase: str) -> tuple[dict[str, T.Tensor], dict[str, float]]:
    cfg = model.cfg
    params: dict[str, T.Tensor] = {}
    rates: dict[str, float] = {}
    if phase in ("pretrain", "main"):
        for k, p in model.extractor_parameters().items():
            params[k], rates[k] = p, cfg.lr_extractor
    for head in model.heads.values():
        for k, p in head.parameters().items():
            if k.endswith("prototypes") and phase in ("pretrain", "main"):
                params[k], rates[k] = p, cfg.lr_heads
            elif k.endswith("classifier") and phase == "main":
                params[k], rates[k] = p, cfg.lr_classifier
            elif k.endswith("mask_logits") and phase in ("main", "mask"):
                params[k], rates[k] = p, cfg.lr_mask
    return params, rates


def _check_finite(values: dict[str, float], phase: str, epoch: int, step: int) -> None:
    if not all(np.isfinite(v) for v in values.values()):
        raise NonFiniteLoss(
            f"non-finite loss in {phase} epoch {epoch} step {step}",
            {"phase": phase, "epoch": epoch, "step": step, "values": values},
        )


def run_training(
    model: Model,
    train: Dataset,
    cfg: ModelConfig | None = None,
    aug: AugmentConfig = AugmentConfig(),
    on_epoch: Callable[[dict], None] | None = None,
    log_file=None,
    progress: TrainingProgress | None = None,
) -> list[dict]:
    """Train in place; returns one loss record per epoch run.

    ``progress`` is updated after every epoch; passing a restored one skips
    the epochs it has already completed.

    Records carry the keys epoch, L_CE, L_A, L_T, L_ovsp, L_disc, L_orth,
    L_mask and total (per-step means). With ``log_file`` each record is also
    written as a JSON line.
    """
    if cfg is not None:
        model.cfg = cfg
    cfg = model.cfg
    progress = progress if progress is not None else TrainingProgress()
    history = []
    for epoch, phase in enumerate(schedule(cfg), start=1):
        if epoch <= progress.epoch:
            continue
        if phase != progress.phase:
            progress.adam = AdamState()
            progress.phase = phase
        state = progress.adam
        batch_rng, aug_rng, noise_rng = epoch_rngs(cfg.seed, epoch)
        params, rates = _param_groups(model, phase)
        sums: dict[str, float] = {}
        batches = make_batches(train.labels, cfg.batch_size, batch_rng, cfg.stratified)
        for step, batch in enumerate(batches):
            views = _views(model, train.images[batch.indices], aug_rng, aug)
            try:
                with Tape() as tape:
                    if phase == "mask":
                        loss, _ = mask_only_losses(model, views, batch.labels, noise_rng)
                        values = {"mask": loss.item(), "total": loss.item()}
                    else:
                        parts, _ = batch_losses(model, views, batch.labels, phase, noise_rng)
                        loss = parts.total
                        values = parts.values()
                    _check_finite(values, phase, epoch, step)
                    grads = tape.backward(loss)
            except T.NonFiniteValue as err:
                raise NonFiniteLoss(str(err), {"phase": phase, "epoch": epoch, "step": step}) from err
            named = {k: grads[p] for k, p in params.items() if p in grads}
            adam_step(params, named, state, lr=rates)
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
        progress.epoch = epoch
        n = max(len(batches), 1)
        record = {"epoch": epoch}
        for key, name in LOG_KEYS.items():
            record[name] = sums.get(key, 0.0) / n
        history.append(record)
        log.info("epoch %d (%s): total %.4f", epoch, phase, record["total"])
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=False) + "\n")
        if on_epoch is not None:
            on_epoch(record)
    return history
