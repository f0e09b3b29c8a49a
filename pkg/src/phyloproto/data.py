"""Synthetic planted-trait images, manifests, augmentation and batching.

Every non-root node of the tree may carry a glyph (a colored shape). An image
of species ``s`` shows the glyph of every non-root ancestor of ``s`` plus the
leaf's own glyph, each dropped into a random cell of a coarse grid and
jittered. A clade's glyph is therefore exactly the trait shared by all of its
species and by nobody else; omitting a node's glyph plants a clade with no
common trait.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .phylo import Phylogeny, parse_newick, serialize_newick
from .pnm import load_image, write_ppm

SHAPES = ("disc", "bar", "cross", "ring")

PALETTE = (
    (0.95, 0.10, 0.10),  # red
    (0.10, 0.80, 0.15),  # green
    (0.15, 0.25, 0.95),  # blue
    (0.95, 0.90, 0.10),  # yellow
    (0.90, 0.15, 0.90),  # magenta
    (0.10, 0.90, 0.90),  # cyan
    (1.00, 0.55, 0.00),  # orange
    (1.00, 1.00, 1.00),  # white
)

DEFAULT_TREE = "(((A,B),(C,D)),((E,F),(G,H)));"


class DataError(ValueError):
    pass


class GlyphOverflow(DataError):
    pass


class BatchTooSmall(DataError):
    pass


class ManifestError(DataError):
    pass


@dataclass(frozen=True)
class Glyph:
    shape: str
    color: tuple[float, float, float]
    size: int = 9
    jitter: int = 6

    def mask(self) -> np.ndarray:
        """Boolean (size, size) footprint."""
        s = self.size
        c = (s - 1) / 2.0
        yy, xx = np.mgrid[0:s, 0:s]
        dy, dx = yy - c, xx - c
        r = np.hypot(dx, dy)
        half_t = max(1.0, s / 6.0)
        if self.shape == "disc":
            m = r <= s / 2.0
        elif self.shape == "ring":
            m = (r <= s / 2.0) & (r >= s / 2.0 - 2.0)
        elif self.shape == "bar":
            m = np.abs(dy) <= half_t
        elif self.shape == "cross":
            m = (np.abs(dy) <= half_t) | (np.abs(dx) <= half_t)
        else:
            raise DataError(f"unknown glyph shape {self.shape!r}")
        return m


@dataclass
class TraitSpec:
    """Which glyph each node plants, plus background and image size."""

    glyphs: dict[int, Glyph]
    image_side: int = 52
    noise: float = 0.04

    def validate(self, tree: Phylogeny) -> None:
        seen = set()
        for node, g in self.glyphs.items():
            tree.check(node)
            if node == tree.root:
                raise DataError("the root has no contrasting clade; it cannot carry a glyph")
            key = (g.shape, tuple(g.color))
            if key in seen:
                raise DataError(f"glyph {key} used twice")
            seen.add(key)
        cell = self.image_side / self.grid(tree)
        for node, g in self.glyphs.items():
            if g.size / 2.0 + g.jitter > cell / 2.0 - 1:
                raise GlyphOverflow(
                    f"glyph of node {node} (size {g.size}, jitter {g.jitter}) does not fit a {cell:.1f} px cell"
                )

    def grid(self, tree: Phylogeny) -> int:
        most = max((len(self.planted(tree, leaf)) for leaf in tree.leaves), default=1)
        return max(1, math.ceil(math.sqrt(max(most, 1))))

    def planted(self, tree: Phylogeny, leaf: int) -> list[int]:
        path = tree.ancestors(leaf)[1:] + [leaf]
        return [n for n in path if n in self.glyphs]


def default_trait_spec(tree: Phylogeny, omit=(), size: int = 9, jitter: int = 6, image_side: int = 52, noise: float = 0.04) -> TraitSpec:
    """A distinct (shape, color) glyph on every non-root node except ``omit``."""
    omit = set(omit)
    glyphs = {}
    for k, node in enumerate(n for n in range(len(tree)) if n != tree.root):
        if k >= len(SHAPES) * len(PALETTE):
            raise DataError("tree too large for the default glyph palette")
        shape = SHAPES[k % len(SHAPES)]
        color = PALETTE[(k % len(SHAPES) + 5 * (k // len(SHAPES))) % len(PALETTE)]
        if node not in omit:
            glyphs[node] = Glyph(shape, color, size, jitter)
    return TraitSpec(glyphs, image_side, noise)


# -- dataset ---------------------------------------------------------------------


@dataclass
class Part:
    name: str
    x: int
    y: int


@dataclass
class Dataset:
    tree: Phylogeny
    images: np.ndarray  # (N, h, w, 3) float64 in [0, 1]
    labels: np.ndarray  # (N,) leaf positions
    split: np.ndarray  # (N,) "train" / "val"
    parts: list[list[Part]] = field(default_factory=list)
    paths: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return Dataset(
            self.tree,
            self.images[idx],
            self.labels[idx],
            self.split[idx],
            [self.parts[i] for i in idx] if self.parts else [],
            [self.paths[i] for i in idx] if self.paths else [],
        )

    def by_split(self, name: str) -> "Dataset":
        return self.subset(self.split == name)

    def without_species(self, names) -> "Dataset":
        drop = [self.tree.leaf_position[self.tree.leaf(n)] for n in names]
        return self.subset(~np.isin(self.labels, drop))

    def of_species(self, names) -> "Dataset":
        keep = [self.tree.leaf_position[self.tree.leaf(n)] for n in names]
        return self.subset(np.isin(self.labels, keep))

    @property
    def species_names(self) -> list[str]:
        return [self.tree.species[i] for i in self.labels]


def _render(rng: np.random.Generator, tree: Phylogeny, spec: TraitSpec, leaf: int, grid: int):
    side = spec.image_side
    img = np.full((side, side, 3), rng.uniform(0.35, 0.6))
    parts = []
    nodes = spec.planted(tree, leaf)
    cells = rng.permutation(grid * grid)[: len(nodes)]
    cell = side / grid
    for node, c in zip(nodes, cells):
        g = spec.glyphs[node]
        cy = int(round((c // grid + 0.5) * cell)) + int(rng.integers(-g.jitter, g.jitter + 1))
        cx = int(round((c % grid + 0.5) * cell)) + int(rng.integers(-g.jitter, g.jitter + 1))
        m = g.mask()
        top, left = cy - g.size // 2, cx - g.size // 2
        if top < 0 or left < 0 or top + g.size > side or left + g.size > side:
            raise GlyphOverflow(f"glyph of node {node} leaves the image")
        region = img[top : top + g.size, left : left + g.size]
        region[m] = g.color
        parts.append(Part(tree.node_label(node), cx, cy))
    img = img + rng.normal(0.0, spec.noise, img.shape)
    # quantize so in-memory and on-disk copies agree bit for bit
    img = np.clip(np.rint(img * 255.0), 0, 255) / 255.0
    return img, parts


def generate_synthetic(
    tree: Phylogeny,
    spec: TraitSpec,
    per_leaf: int = 80,
    seed: int = 0,
    train_fraction: float = 0.75,
) -> Dataset:
    """Render ``per_leaf`` images for every species; deterministic per seed."""
    spec.validate(tree)
    grid = spec.grid(tree)
    rng = np.random.default_rng(seed)
    n_train = int(round(per_leaf * train_fraction))
    images, labels, split, parts = [], [], [], []
    for pos, leaf in enumerate(tree.leaves):
        for k in range(per_leaf):
            img, p = _render(rng, tree, spec, leaf, grid)
            images.append(img)
            labels.append(pos)
            split.append("train" if k < n_train else "val")
            parts.append(p)
    side = spec.image_side
    arr = np.stack(images) if images else np.zeros((0, side, side, 3))
    names = [f"images/{tree.species[l]}_{i:04d}.ppm" for i, l in enumerate(labels)]
    return Dataset(tree, arr, np.array(labels, dtype=np.int64), np.array(split), parts, names)


def write_dataset(ds: Dataset, out_dir, tree_file: str = "tree.nwk", extra: dict | None = None) -> Path:
    """Write PPM images, the Newick tree and ``manifest.json``; returns the manifest path.

    ``extra`` keys are stored at the top level of the manifest next to
    ``phylogeny`` and ``images``.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / tree_file).write_text(serialize_newick(ds.tree) + "\n", encoding="utf-8")
    records = []
    for i in range(len(ds)):
        rel = ds.paths[i] if ds.paths else f"images/{i:05d}.ppm"
        write_ppm(out / rel, ds.images[i])
        records.append(
            {
                "path": rel,
                "species": ds.tree.species[int(ds.labels[i])],
                "split": str(ds.split[i]),
                "parts": [{"name": p.name, "x": p.x, "y": p.y} for p in (ds.parts[i] if ds.parts else [])],
            }
        )
    manifest = out / "manifest.json"
    body = {**(extra or {}), "phylogeny": tree_file, "images": records}
    manifest.write_text(json.dumps(body, indent=1) + "\n", encoding="utf-8")
    return manifest


def load_manifest(path) -> Dataset:
    """Read a manifest (or a directory holding ``manifest.json``) and its images."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ManifestError(f"{path}: {err}") from None
    root = path.parent
    tree = parse_newick((root / raw["phylogeny"]).read_text(encoding="utf-8"))
    images, labels, split, parts, paths = [], [], [], [], []
    for rec in raw["images"]:
        if rec["species"] not in tree.leaf_map:
            raise ManifestError(f"unknown species {rec['species']!r}")
        if rec["split"] not in ("train", "val"):
            raise ManifestError(f"bad split {rec['split']!r}")
        img = load_image(root / rec["path"])
        h, w = img.shape[:2]
        ps = [Part(p["name"], int(p["x"]), int(p["y"])) for p in rec.get("parts", [])]
        for p in ps:
            if not (0 <= p.x < w and 0 <= p.y < h):
                raise ManifestError(f"part {p.name} of {rec['path']} is outside the image")
        images.append(img)
        labels.append(tree.leaf_position[tree.leaf_map[rec["species"]]])
        split.append(rec["split"])
        parts.append(ps)
        paths.append(rec["path"])
    if len(set(paths)) != len(paths):
        raise ManifestError("an image is listed twice")
    return Dataset(tree, np.stack(images), np.array(labels, dtype=np.int64), np.array(split), parts, paths)


# -- pixel-space oracle -------------------------------------------------------------


def detect_glyph(image: np.ndarray, glyph: Glyph, tol: float = 0.3) -> bool:
    """Template match: some placement where the footprint is the glyph color
    and the rest of the bounding box is not."""
    m = glyph.mask()
    s = glyph.size
    close = np.all(np.abs(image - np.asarray(glyph.color)) < tol, axis=-1)
    win = sliding_window_view(close, (s, s))
    on = (win & m).sum(axis=(-1, -2)) / m.sum()
    off = (win & ~m).sum(axis=(-1, -2)) / max((~m).sum(), 1)
    return bool(np.any((on >= 0.9) & (off <= 0.1)))


# -- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    max_shift: float = 0.1
    brightness: tuple[float, float] = (0.8, 1.25)
    noise: float = 0.02

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0)


def _geometry(img: np.ndarray, flip: bool, dy: int, dx: int) -> np.ndarray:
    if flip:
        img = img[:, ::-1]
    if dy or dx:
        p = max(abs(dy), abs(dx))
        padded = np.pad(img, ((p, p), (p, p), (0, 0)), mode="edge")
        h, w = img.shape[:2]
        img = padded[p - dy : p - dy + h, p - dx : p - dx + w]
    return img


def _photometric(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    lo, hi = cfg.brightness
    if hi > lo:
        img = img * rng.uniform(lo, hi)
    elif lo != 1.0:
        img = img * lo
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def augment_pair(image: np.ndarray, seed=None, cfg: AugmentConfig = AugmentConfig()):
    """Two views of one image.

    Flip and translation are drawn once and shared so that score-map
    locations correspond across the views; brightness and noise are drawn
    independently per view.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    side = image.shape[0]
    flip = bool(rng.random() < cfg.flip_p)
    reach = int(round(cfg.max_shift * side))
    dy, dx = (int(v) for v in rng.integers(-reach, reach + 1, size=2)) if reach else (0, 0)
    base = _geometry(np.asarray(image, dtype=np.float64), flip, dy, dx)
    return _photometric(base, rng, cfg), _photometric(base, rng, cfg)


def augment_batch(images: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    first, second = zip(*(augment_pair(img, rng, cfg) for img in images))
    return np.stack(first), np.stack(second)


# -- batching ------------------------------------------------------------------


@dataclass
class BatchView:
    indices: np.ndarray  # rows of the source dataset
    labels: np.ndarray  # leaf position per row

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def species_sets(self) -> dict[int, np.ndarray]:
        """leaf position -> row positions within this batch."""
        return {int(s): np.flatnonzero(self.labels == s) for s in np.unique(self.labels)}


def make_batches(labels, batch_size: int, seed=None, stratified: bool = True) -> list[BatchView]:
    """Partition one epoch into batches.

    Stratified mode deals images round-robin across species, so every batch
    holds at least one image of each species while any remain.
    """
    labels = np.asarray(labels)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if not stratified:
        order = rng.permutation(len(labels))
        return [BatchView(order[i : i + batch_size], labels[order[i : i + batch_size]]) for i in range(0, len(order), batch_size)]
    species = np.unique(labels)
    if batch_size < len(species):
        raise BatchTooSmall(f"batch of {batch_size} cannot hold {len(species)} species")
    pools = {int(s): list(rng.permutation(np.flatnonzero(labels == s))) for s in species}
    batches = []
    remaining = len(labels)
    while remaining:
        picked: list[int] = []
        while len(picked) < batch_size and remaining:
            for s in species:
                pool = pools[int(s)]
                if pool and len(picked) < batch_size:
                    picked.append(int(pool.pop()))
                    remaining -= 1
        idx = np.array(picked)
        batches.append(BatchView(idx, labels[idx]))
    return batches


def default_tree() -> Phylogeny:
    return parse_newick(DEFAULT_TREE)
