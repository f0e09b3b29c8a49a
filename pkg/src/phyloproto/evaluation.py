"""Hierarchical inference and evaluation metrics.

Leaf probabilities are products of per-node child probabilities along the
root path. Part purity follows the weakest-link protocol: for each prototype,
take the top-k images of every descendant species, center a window on the
strongest score-map cell, count how often each annotated part falls inside,
keep the lowest per-species frequency of each part and report the best part.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, Part
from .masking import deterministic_mask
from .model import Model
from .phylo import Phylogeny
from .phylo import Phylogeny, root_path
from .pnm import write_pgm


class MissingParts(ValueError):
    pass


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("PHYLOPROTO_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Inference:
    """Forward-pass summaries for a set of images."""

    probs: dict[int, np.ndarray]  # node -> (N, n_children)
    pooled: dict[int, np.ndarray]  # node -> (N, K)
    peaks: dict[int, np.ndarray]  # node -> (N, K) flat index of the first maximal cell
    grid: tuple[int, int]


def infer(model: Model, images: np.ndarray, chunk: int = 64, threads: int | None = None) -> Inference:
    threads = eval_threads() if threads is None else threads
    starts = list(range(0, len(images), chunk))

    def run(start):
        outs = model.forward(images[start : start + chunk])
        res = {}
        for n, o in outs.items():
            s = o.score_map.data
            B, H, W, K = s.shape
            res[n] = (o.probs, o.pooled.data, s.reshape(B, H * W, K).argmax(axis=1))
        return res

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    H, W = model.feat_shape[:2]
    probs, pooled, peaks = {}, {}, {}
    for n, head in model.heads.items():
        nc = head.n_children
        probs[n] = np.concatenate([p[n][0] for p in parts]) if parts else np.zeros((0, nc))
        pooled[n] = np.concatenate([p[n][1] for p in parts]) if parts else np.zeros((0, head.K))
        peaks[n] = np.concatenate([p[n][2] for p in parts]) if parts else np.zeros((0, head.K), int)
    return Inference(probs, pooled, peaks, (H, W))


# -- path probabilities ------------------------------------------------------------


def leaf_path_probabilities(tree: Phylogeny, probs: dict[int, np.ndarray]) -> np.ndarray:
    """(N, n_leaves) products of child probabilities along each root path."""
    n = len(next(iter(probs.values())))
    out = np.ones((n, len(tree.leaves)))
    for k, leaf in enumerate(tree.leaves):
        for node, pos in root_path(tree, leaf):
            out[:, k] *= probs[node][:, pos]
    return out


def node_path_probabilities(tree: Phylogeny, probs: dict[int, np.ndarray]) -> np.ndarray:
    """(N, n_nodes): probability of reaching every node from the root."""
    n = len(next(iter(probs.values())))
    out = np.ones((n, len(tree)))
    for i, node in enumerate(tree.nodes):  # preorder: parents first
        if node.parent is not None:
            pos = tree.nodes[node.parent].children.index(i)
            out[:, i] = out[:, node.parent] * probs[node.parent][:, pos]
    return out


def path_probability(model: Model, image: np.ndarray, leaf) -> float:
    """P(leaf | image) for one image; ``leaf`` is a species name or node index."""
    tree = model.tree
    if isinstance(leaf, str):
        leaf = tree.leaf(leaf)
    probs = {n: o.probs[0] for n, o in model.forward(np.asarray(image)[None]).items()}
    p = 1.0
    for node, pos in root_path(tree, leaf):
        p *= float(probs[node][pos])
    return p


def predict_leaves(tree: Phylogeny, probs: dict[int, np.ndarray]) -> np.ndarray:
    """Leaf position with the highest path probability (ties: lowest position)."""
    return leaf_path_probabilities(tree, probs).argmax(axis=1)


def fine_grained_accuracy(model: Model, dataset: Dataset, inference: Inference | None = None) -> float:
    if len(dataset) == 0:
        return float("nan")
    inf = inference or infer(model, dataset.images)
    return float(np.mean(predict_leaves(model.tree, inf.probs) == dataset.labels))


def per_level_accuracy(tree: Phylogeny, probs: dict[int, np.ndarray], labels: np.ndarray) -> list[float]:
    """Accuracy of the predicted leaf's ancestor at each depth 1..max depth."""
    pred = predict_leaves(tree, probs)

    def lineage(pos):
        leaf = tree.leaves[int(pos)]
        return tree.ancestors(leaf)[1:] + [leaf]

    max_depth = max(tree.depth(l) for l in tree.leaves)
    out = []
    for level in range(1, max_depth + 1):
        hits = total = 0
        for p, y in zip(pred, labels):
            truth = lineage(y)
            if len(truth) < level:
                continue
            guess = lineage(p)
            total += 1
            hits += len(guess) >= level and guess[level - 1] == truth[level - 1]
        out.append(hits / total if total else float("nan"))
    return out


def leaf_parents(tree: Phylogeny) -> list[int]:
    return sorted({tree.parent(l) for l in tree.leaves})


def predict_parents(tree: Phylogeny, probs: dict[int, np.ndarray]) -> np.ndarray:
    """Most probable parent-of-leaf node, dropping the leaf-level factor."""
    cands = leaf_parents(tree)
    reach = node_path_probabilities(tree, probs)[:, cands]
    return np.asarray(cands)[reach.argmax(axis=1)]


def unseen_accuracy(model: Model, images: np.ndarray, true_parent: int, inference: Inference | None = None) -> float:
    """Fraction of images routed to ``true_parent`` one level above the leaves."""
    if len(images) == 0:
        return float("nan")
    inf = inference or infer(model, images)
    return float(np.mean(predict_parents(model.tree, inf.probs) == true_parent))


# -- part purity ---------------------------------------------------------------------


def window_side(image_side: int) -> int:
    """32 px at 224 px input, scaled to the image; never below 3."""
    return max(3, int(round(image_side * 32 / 224)))


def cell_center(cell: int, grid: tuple[int, int], image_side: int) -> tuple[float, float]:
    """(x, y) pixel center of a score-map cell under nearest-neighbor upsampling."""
    H, W = grid
    h, w = divmod(int(cell), W)
    return (w + 0.5) * image_side / W - 0.5, (h + 0.5) * image_side / H - 0.5


def in_window(part: Part, center: tuple[float, float], side: int, image_side: int) -> bool:
    """Half-open window of ``side`` px centered on ``center``, shifted inside the image."""
    inside = True
    for coord, c in ((part.x, center[0]), (part.y, center[1])):
        lo = c - side / 2.0
        lo = min(max(lo, 0.0), image_side - side)
        inside &= lo <= coord < lo + side
    return bool(inside)


@dataclass
class PurityRecord:
    node: int
    prototype: int
    child: int
    purity: float
    best_part: str | None
    part_scores: dict[str, float] = field(default_factory=dict)
    masked: bool = False
    top_images: dict[str, list[int]] = field(default_factory=dict)


def prototype_purity(
    pooled: np.ndarray,
    peaks: np.ndarray,
    labels: np.ndarray,
    parts: list[list[Part]],
    species: list[int],
    grid: tuple[int, int],
    image_side: int,
    top_k: int = 10,
    window: int | None = None,
    names: list[str] | None = None,
) -> tuple[float, str | None, dict[str, float], dict[str, list[int]]]:
    """Weakest-link purity of one prototype.

    ``pooled`` and ``peaks`` are that prototype's (N,) pooled scores and peak
    cells; ``species`` the leaf positions descending from its child.
    """
    side = window or window_side(image_side)
    freqs: list[dict[str, float]] = []
    tops: dict[str, list[int]] = {}
    for s in species:
        rows = np.flatnonzero(labels == s)
        if len(rows) == 0:
            continue
        order = rows[np.argsort(-pooled[rows], kind="stable")][:top_k]
        tops[names[s] if names else str(s)] = [int(i) for i in order]
        counts: dict[str, int] = {}
        for i in order:
            center = cell_center(peaks[i], grid, image_side)
            for p in parts[i]:
                if in_window(p, center, side, image_side):
                    counts[p.name] = counts.get(p.name, 0) + 1
        freqs.append({k: v / len(order) for k, v in counts.items()})
    if not freqs:
        return 0.0, None, {}, tops
    names_all = sorted(set().union(*freqs))
    scores = {p: min(f.get(p, 0.0) for f in freqs) for p in names_all}
    if not scores:
        return 0.0, None, {}, tops
    best = max(names_all, key=lambda p: (scores[p], -names_all.index(p)))
    return scores[best], best, scores, tops


@dataclass
class PurityReport:
    records: list[PurityRecord]

    def _stats(self, recs) -> tuple[float, float]:
        vals = np.array([r.purity for r in recs])
        if len(vals) == 0:
            return float("nan"), float("nan")
        return float(vals.mean()), float(vals.std())

    @property
    def unmasked(self) -> tuple[float, float]:
        return self._stats([r for r in self.records if not r.masked])

    @property
    def masked(self) -> tuple[float, float]:
        return self._stats([r for r in self.records if r.masked])

    @property
    def overall(self) -> tuple[float, float]:
        return self._stats(self.records)

    @property
    def pct_masked(self) -> float:
        return 100.0 * sum(r.masked for r in self.records) / max(len(self.records), 1)

    def to_dict(self, tree: Phylogeny | None = None) -> dict:
        """JSON-ready summary; with ``tree`` each prototype also carries node labels."""
        label = tree.node_label if tree is not None else (lambda n: None)
        return {
            "part_purity_mean": self.unmasked[0],
            "part_purity_sd": self.unmasked[1],
            "purity_masked_mean": self.masked[0],
            "purity_all_mean": self.overall[0],
            "pct_masked": self.pct_masked,
            "prototypes": [
                {
                    "node": r.node,
                    "prototype": r.prototype,
                    "child": r.child,
                    "node_label": label(r.node),
                    "child_label": label(r.child),
                    "purity": r.purity,
                    "best_part": r.best_part,
                    "masked": r.masked,
                }
                for r in self.records
            ],
        }


def part_purity(
    model: Model,
    dataset: Dataset,
    top_k: int = 10,
    window: int | None = None,
    inference: Inference | None = None,
) -> PurityReport:
    """Purity of every prototype; masked ones are flagged, not dropped."""
    if not dataset.parts or not any(dataset.parts):
        raise MissingParts("dataset has no part annotations")
    tree = model.tree
    inf = inference or infer(model, dataset.images)
    side = model.cfg.image_side
    records = []
    for n, head in model.heads.items():
        M = deterministic_mask(head, model.cfg.tau)
        kids = tree.children(n)
        for i in range(head.K):
            child = kids[head.child_of_proto[i]]
            species = sorted(tree.leaf_position[l] for l in tree.descendants(child))
            purity, best, scores, tops = prototype_purity(
                inf.pooled[n][:, i],
                inf.peaks[n][:, i],
                dataset.labels,
                dataset.parts,
                species,
                inf.grid,
                side,
                top_k,
                window,
                list(tree.species),
            )
            records.append(PurityRecord(n, i, child, purity, best, scores, bool(M[i] < 0.5), tops))
    return PurityReport(records)


# -- heatmaps --------------------------------------------------------------------------


def export_heatmap(model: Model, image: np.ndarray, node: int, prototype: int, path=None) -> tuple[np.ndarray, dict]:
    """8-bit min-max scaled score map of one prototype, upsampled to the image.

    Returns the PGM raster and ``{"peak": [x, y], "pooled": g}``; with
    ``path`` also writes ``path`` (PGM) and a ``.json`` sidecar.
    """
    head = model.heads[node]
    if not 0 <= prototype < head.K:
        raise IndexError(f"node {node} has {head.K} prototypes")
    out = model.forward(np.asarray(image)[None])[node]
    channel = out.score_map.data[0, :, :, prototype]
    H, W = channel.shape
    side = model.cfg.image_side
    lo, hi = channel.min(), channel.max()
    scaled = np.zeros_like(channel) if hi <= lo else (channel - lo) / (hi - lo)
    raster = np.clip(np.rint(scaled * 255), 0, 255).astype(np.uint8)
    rows = (np.arange(side) * H) // side
    cols = (np.arange(side) * W) // side
    big = raster[rows][:, cols]
    cell = int(channel.reshape(-1).argmax())
    x, y = cell_center(cell, (H, W), side)
    info = {"node": node, "prototype": prototype, "peak": [x, y], "pooled": float(out.pooled.data[0, prototype])}
    if path is not None:
        path = Path(path)
        write_pgm(path, big)
        path.with_suffix(".json").write_text(json.dumps(info, indent=1) + "\n", encoding="utf-8")
    return big, info


def heatmap_name(node: int, prototype: int, image: int) -> str:
    return f"node{node}_proto{prototype}_img{image}.pgm"


def run_metrics(model: Model, dataset: Dataset, top_k: int = 10, epochs: int | None = None) -> dict:
    """The metrics.json payload for ``dataset`` (usually the validation split)."""
    inf = infer(model, dataset.images)
    acc = float(np.mean(predict_leaves(model.tree, inf.probs) == dataset.labels)) if len(dataset) else float("nan")
    metrics = {
        "accuracy": acc,
        "per_level_accuracy": per_level_accuracy(model.tree, inf.probs, dataset.labels) if len(dataset) else [],
        "epochs": epochs,
        "seed": model.cfg.seed,
    }
    if dataset.parts and any(dataset.parts):
        rep = part_purity(model, dataset, top_k, inference=inf)
        metrics.update(
            part_purity_mean=rep.unmasked[0],
            part_purity_sd=rep.unmasked[1],
            purity_masked_mean=rep.masked[0],
            pct_masked=rep.pct_masked,
        )
    return metrics
