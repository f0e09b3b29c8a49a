"""Over-specificity scores and the learned prototype masks.

A prototype's over-specificity score is minus the product, over the
descendant species of its child, of its best score within each species. It
lies in [-1, 0]; values near 0 mean at least one descendant species never
shows the prototype.

Masks are binary-concrete relaxations of per-prototype (keep, drop) logits.
The mask loss ``sum(lam_mask * M * stopgrad(O) + lam_l1 * |M|)`` is linear in
each ``M``, so for a constant score the mask settles at 1 exactly when
``O < -lam_l1 / lam_mask`` (-0.25 with the published weights).
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .losses import species_masks
from .model import Model, PrototypeHead
from .phylo import Phylogeny
from .tape import Tensor


class NonPositiveTemperature(ValueError):
    pass


class SpeciesUnderrepresented(UserWarning):
    pass


def overspecificity_score(G, labels, head: PrototypeHead, tree: Phylogeny) -> np.ndarray:
    """Batch-scoped score per prototype; species absent from the batch are skipped."""
    G = np.asarray(G.data if isinstance(G, Tensor) else G)
    labels = np.asarray(labels)
    desc, _ = species_masks(tree, head)
    prod = np.ones(head.K)
    for s in np.unique(labels):
        best = G[labels == s].max(axis=0)
        prod *= np.where(desc[s] > 0, best, 1.0)
    return -prod


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def relaxed_mask(mask_logits: Tensor, tau: float, noise: np.ndarray | None = None) -> Tensor:
    """Binary-concrete sample sigmoid((keep - drop + g1 - g2) / tau).

    ``mask_logits`` is (K, 2) or a single (2,) pair; ``noise=None`` is the
    deterministic evaluation mode.
    """
    if tau <= 0:
        raise NonPositiveTemperature(f"tau must be positive, got {tau}")
    gamma = T.as_tensor(mask_logits)
    single = gamma.ndim == 1
    if single:
        gamma = T.reshape(gamma, (1, 2))
    gap = T.reshape(T.matmul(gamma, Tensor([[1.0], [-1.0]])), (gamma.shape[0],))
    if noise is not None:
        noise = np.asarray(noise, dtype=float).reshape(gamma.shape)
        gap = T.add(gap, Tensor(noise[:, 0] - noise[:, 1]))
    M = T.sigmoid(T.scalar_mul(gap, 1.0 / tau))
    return T.reshape(M, ()) if single else M


def deterministic_mask(head: PrototypeHead, tau: float) -> np.ndarray:
    gap = head.mask_logits.data[:, 0] - head.mask_logits.data[:, 1]
    return 0.5 * (1.0 + np.tanh(0.5 * gap / tau))


def mask_loss(M: Tensor, O, lam_mask: float, lam_l1: float) -> Tensor:
    M = T.as_tensor(M)
    O = T.stop_gradient(T.as_tensor(O))
    if O.shape != M.shape:
        raise T.ShapeMismatch(f"mask {M.shape} vs scores {O.shape}")
    weighted = T.scalar_mul(T.mul(M, O), lam_mask)
    return T.sum_(T.add(weighted, T.scalar_mul(T.abs_(M), lam_l1)))


def mask_fixed_point(O: float, lam_mask: float, lam_l1: float) -> bool | None:
    """True (keep) / False (drop) limit of mask training at constant score O.

    Returns None on the indifference boundary ``O == -lam_l1 / lam_mask``.
    """
    if lam_mask <= 0:
        raise ValueError("lam_mask must be positive")
    slope = lam_mask * O + lam_l1
    if slope == 0:
        return None
    return slope < 0


def pooled_scores(model: Model, images: np.ndarray, chunk: int = 128) -> dict[int, np.ndarray]:
    """node -> (N, K) pooled scores, computed without recording gradients."""
    out: dict[int, list[np.ndarray]] = {n: [] for n in model.heads}
    for start in range(0, len(images), chunk):
        for n, o in model.forward(images[start : start + chunk]).items():
            out[n].append(o.pooled.data)
    return {n: np.concatenate(v) if v else np.zeros((0, model.heads[n].K)) for n, v in out.items()}


def posthoc_from_pooled(G: np.ndarray, labels, head: PrototypeHead, tree: Phylogeny, top_k: int = 10) -> np.ndarray:
    """-prod over descendant species of the mean of the top_k scores in that species."""
    if top_k < 1:
        raise ValueError("top_k must be positive")
    labels = np.asarray(labels)
    desc, _ = species_masks(tree, head)
    prod = np.ones(head.K)
    for s in range(desc.shape[0]):
        if not desc[s].any():
            continue
        rows = G[labels == s]
        name = tree.species[s]
        if len(rows) == 0:
            warnings.warn(f"no images of {name}; skipped", SpeciesUnderrepresented, stacklevel=2)
            continue
        if len(rows) < top_k:
            warnings.warn(f"{name} has {len(rows)} < {top_k} images", SpeciesUnderrepresented, stacklevel=2)
        k = min(top_k, len(rows))
        top = -np.sort(-rows, axis=0, kind="stable")[:k]
        prod *= np.where(desc[s] > 0, top.mean(axis=0), 1.0)
    return -prod


def posthoc_scores(model: Model, images: np.ndarray, labels, top_k: int = 10) -> dict[int, np.ndarray]:
    pooled = pooled_scores(model, images)
    return {n: posthoc_from_pooled(pooled[n], labels, h, model.tree, top_k) for n, h in model.heads.items()}


def threshold_mask(O: np.ndarray, threshold: float) -> np.ndarray:
    """Post-hoc rule: over-specific when the score's magnitude is below threshold."""
    return -np.asarray(O) < threshold


@dataclass
class MaskRow:
    node: int
    prototype: int
    child_name: str
    O_score: float
    M_value: float
    masked: bool


def mask_report(model: Model, images: np.ndarray, labels, top_k: int = 10) -> list[MaskRow]:
    """Per-prototype table; masked means deterministic M < 0.5."""
    scores = posthoc_scores(model, images, labels, top_k)
    rows = []
    tree = model.tree
    for n, head in model.heads.items():
        M = deterministic_mask(head, model.cfg.tau)
        kids = tree.children(n)
        for i in range(head.K):
            child = kids[head.child_of_proto[i]]
            rows.append(MaskRow(n, i, tree.node_label(child), float(scores[n][i]), float(M[i]), bool(M[i] < 0.5)))
    return rows


def report_csv(rows: list[MaskRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node_id", "prototype_id", "child_name", "O_score", "M_value", "masked"])
    for r in rows:
        w.writerow([r.node, r.prototype, r.child_name, repr(r.O_score), repr(r.M_value), int(r.masked)])
    return buf.getvalue()


def masked_fraction(rows: list[MaskRow]) -> float:
    return sum(r.masked for r in rows) / len(rows) if rows else 0.0
