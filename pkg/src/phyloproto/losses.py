"""Training objectives for hierarchy-aligned prototypes.

Every per-node loss takes pooled scores ``G`` of shape (B, K) and the leaf
position of each row (``labels``). Species missing from a batch are skipped
by the over-specificity and discriminative terms; without that, a batch that
lacks one descendant species would make the over-specificity term infinite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as T
from .model import PrototypeHead
from .phylo import Phylogeny, root_path
from .tape import EPS_LOG, Tensor


def species_masks(tree: Phylogeny, head: PrototypeHead) -> tuple[np.ndarray, np.ndarray]:
    """(descendant, contrasting) indicator matrices, each (n_species, K).

    ``desc[s, i]`` is 1 when leaf ``s`` descends from prototype i's child;
    ``contrast[s, i]`` when it descends from one of that child's siblings.
    """
    cache = getattr(head, "_species_masks", None)
    if cache is not None and cache[0] is tree:
        return cache[1], cache[2]
    kids = tree.children(head.node)
    n_sp = len(tree.leaves)
    under_child = np.zeros((n_sp, len(kids)))
    for c, child in enumerate(kids):
        for leaf in tree.descendants(child):
            under_child[tree.leaf_position[leaf], c] = 1.0
    desc = under_child[:, head.child_of_proto]
    under_node = under_child.sum(axis=1, keepdims=True)
    contrast = (under_node - desc) * np.ones((1, head.K))
    head._species_masks = (tree, desc, contrast)
    return desc, contrast


def _groups(labels: np.ndarray) -> list[tuple[int, np.ndarray]]:
    labels = np.asarray(labels)
    return [(int(s), np.flatnonzero(labels == s)) for s in np.unique(labels)]


def alignment_loss(first: Tensor, second: Tensor) -> Tensor:
    """Mean over locations (and images) of -log(<z', z''>)."""
    first, second = T.as_tensor(first), T.as_tensor(second)
    if first.shape != second.shape:
        raise T.ShapeMismatch(f"alignment: {first.shape} vs {second.shape}")
    agree = T.sum_(T.mul(first, second), axis=-1)
    return T.scalar_mul(T.mean(T.log(agree, EPS_LOG)), -1.0)


def tanh_loss(G: Tensor) -> Tensor:
    G = T.as_tensor(G)
    presence = T.tanh(T.sum_(G, axis=0))
    return T.scalar_mul(T.mean(T.log(presence, EPS_LOG)), -1.0)


def overspecificity_loss(G: Tensor, labels, head: PrototypeHead, tree: Phylogeny) -> Tensor:
    """Tanh presence loss applied separately to each descendant species."""
    G = T.as_tensor(G)
    desc, _ = species_masks(tree, head)
    groups = _groups(labels)
    select = np.zeros((len(groups), G.shape[0]))
    for r, (_, rows) in enumerate(groups):
        select[r, rows] = 1.0
    per_species = T.matmul(Tensor(select), G)  # (n_present, K) column sums per species
    weight = desc[[s for s, _ in groups]]
    terms = T.mul(T.log(T.tanh(per_species), EPS_LOG), Tensor(weight))
    return T.scalar_mul(T.sum_(terms), -1.0 / head.K)


def discriminative_loss(G: Tensor, labels, head: PrototypeHead, tree: Phylogeny) -> Tensor:
    """Sum over contrasting species of each prototype's highest score."""
    G = T.as_tensor(G)
    _, contrast = species_masks(tree, head)
    groups = [(s, rows) for s, rows in _groups(labels) if contrast[s].any()]
    if not groups:
        return T.scalar_mul(T.sum_(G), 0.0)
    maxima = T.stack([T.max_(T.take(G, rows, axis=0), axis=0) for _, rows in groups])
    weight = contrast[[s for s, _ in groups]]
    return T.scalar_mul(T.sum_(T.mul(maxima, Tensor(weight))), 1.0 / head.K)


def orthogonality_loss(P: Tensor, eps: float = 1e-12) -> Tensor:
    """Squared Frobenius distance between the K x K Gram of unit rows and I."""
    P = T.as_tensor(P)
    K, C = P.shape
    norms = T.sqrt(T.add(T.sum_(T.square(P), axis=1, keepdims=True), eps))
    unit = T.div(P, T.expand(norms, (K, C)))
    gram = T.matmul(unit, T.transpose(unit))
    return T.sum_(T.square(T.sub(gram, Tensor(np.eye(K)))))


def child_targets(tree: Phylogeny, labels) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """node -> (row indices under the node, child position for each row)."""
    rows: dict[int, list[int]] = {}
    targets: dict[int, list[int]] = {}
    for b, s in enumerate(np.asarray(labels)):
        for node, pos in root_path(tree, tree.leaves[int(s)]):
            rows.setdefault(node, []).append(b)
            targets.setdefault(node, []).append(pos)
    return {n: (np.array(rows[n]), np.array(targets[n])) for n in rows}


def node_cross_entropy(logits: Tensor, rows: np.ndarray, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Negative log softmax of the true child, over ``rows``; ``reduction`` is "mean" or "sum"."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    picked = T.log_softmax(T.take(logits, rows, axis=0))
    onehot = np.zeros(picked.shape)
    onehot[np.arange(len(rows)), targets] = 1.0
    scale = -1.0 if reduction == "sum" else -1.0 / len(rows)
    return T.scalar_mul(T.sum_(T.mul(picked, Tensor(onehot))), scale)


def classification_loss(logits: dict[int, Tensor], labels, tree: Phylogeny, reduction: str = "mean") -> Tensor:
    """Per-node cross-entropy over the images beneath each node, summed over nodes."""
    total = None
    for node, (rows, targets) in child_targets(tree, labels).items():
        if node not in logits:
            continue
        term = node_cross_entropy(logits[node], rows, targets, reduction)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("no image lies under any scored node")
    return total


TERMS = ("ce", "align", "tanh", "ovsp", "disc", "orth")


@dataclass
class LossBreakdown:
    """Per-term values summed over nodes, and the weighted total."""

    terms: dict[str, Tensor] = field(default_factory=dict)
    mask: Tensor | None = None
    total: Tensor | None = None

    def values(self) -> dict[str, float]:
        out = {k: v.item() for k, v in self.terms.items()}
        out["mask"] = self.mask.item() if self.mask is not None else 0.0
        out["total"] = self.total.item() if self.total is not None else 0.0
        return out


def accumulate(breakdown: LossBreakdown, name: str, value: Tensor) -> None:
    prev = breakdown.terms.get(name)
    breakdown.terms[name] = value if prev is None else T.add(prev, value)


def combined_loss(breakdown: LossBreakdown, lambdas: dict[str, float]) -> Tensor:
    """Weighted sum of the per-term totals plus the (unweighted) mask loss."""
    total = Tensor(0.0)
    for name, value in breakdown.terms.items():
        w = lambdas[name]
        if w:
            total = T.add(total, T.scalar_mul(value, w))
    if breakdown.mask is not None:
        total = T.add(total, breakdown.mask)
    breakdown.total = total
    return total
