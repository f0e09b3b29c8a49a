"""Shared convolutional extractor plus one prototype head per internal node.

For a batch of images the forward pass is

    Z      = extractor(x)                       (B, H, W, C)
    S      = Z @ P.T                            (B, H, W, K)   dot-product similarity
    Zhat   = softmax over the K channels
    g      = max over H, W of Zhat              (B, K)
    logits = log((g @ (relu(phi) * wiring))**2 + 1)

where ``wiring`` ties each block of ``beta`` prototypes to one child.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tape as T
from .config import ModelConfig
from .phylo import Phylogeny, TrivialTree, prototype_budget
from .tape import Tensor


@dataclass
class NodeOutput:
    score_map: Tensor  # (B, H, W, K), fibers sum to 1
    pooled: Tensor  # (B, K)
    logits: Tensor  # (B, n_children)

    @property
    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


class PrototypeHead:
    """Prototypes, restricted classifier and mask logits for one internal node."""

    def __init__(self, node: int, n_children: int, beta: int, channels: int, rng: np.random.Generator, std: float):
        self.node = node
        self.beta = beta
        self.n_children = n_children
        self.K = beta * n_children
        self.child_of_proto = np.repeat(np.arange(n_children), beta)
        self.wiring = np.zeros((self.K, n_children))
        self.wiring[np.arange(self.K), self.child_of_proto] = 1.0
        self.prototypes = Tensor(rng.normal(0.0, std, (self.K, channels)), True, f"node{node}.prototypes")
        phi = rng.normal(1.0, 0.1, (self.K, n_children)) * self.wiring
        self.classifier = Tensor(phi, True, f"node{node}.classifier")
        # column 0 = keep, column 1 = drop; equal logits give M = 0.5
        self.mask_logits = Tensor(np.zeros((self.K, 2)), True, f"node{node}.mask_logits")

    def parameters(self) -> dict[str, Tensor]:
        return {
            f"node{self.node}.prototypes": self.prototypes,
            f"node{self.node}.classifier": self.classifier,
            f"node{self.node}.mask_logits": self.mask_logits,
        }

    def prototypes_of(self, child_pos: int) -> np.ndarray:
        return np.flatnonzero(self.child_of_proto == child_pos)


def prototype_scores(head: PrototypeHead, Z: Tensor) -> Tensor:
    """Channel-softmaxed similarity map, shape ``Z.shape[:-1] + (K,)``."""
    Z = T.as_tensor(Z)
    C = head.prototypes.shape[1]
    if Z.shape[-1] != C:
        raise T.ShapeMismatch(f"feature map has {Z.shape[-1]} channels, prototypes {C}")
    flat = T.reshape(Z, (-1, C))
    sim = T.matmul(flat, T.transpose(head.prototypes))
    return T.softmax_channels(T.reshape(sim, Z.shape[:-1] + (head.K,)))


def pool_scores(score_map: Tensor) -> Tensor:
    """Global spatial max; accepts (H, W, K) or (B, H, W, K)."""
    nd = score_map.ndim
    return T.max_(score_map, axis=(nd - 3, nd - 2))


def node_logits(head: PrototypeHead, pooled: Tensor) -> Tensor:
    weights = T.mul(T.relu(head.classifier), Tensor(head.wiring))
    g = T.as_tensor(pooled)
    squeeze = g.ndim == 1
    if squeeze:
        g = T.reshape(g, (1, -1))
    out = T.log(T.add(T.square(T.matmul(g, weights)), 1.0))
    return T.reshape(out, (head.n_children,)) if squeeze else out


class Model:
    def __init__(self, tree: Phylogeny, cfg: ModelConfig):
        self.tree = tree
        self.cfg = cfg
        self.layers: list[tuple[Tensor, Tensor, int, int]] = []
        self.heads: "OrderedDict[int, PrototypeHead]" = OrderedDict()

    @property
    def feat_shape(self) -> tuple[int, int, int]:
        s = self.cfg.feat_side
        return (s, s, self.cfg.feat_channels)

    def extractor_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b, _, _) in enumerate(self.layers):
            out[f"extractor.{i}.weight"] = w
            out[f"extractor.{i}.bias"] = b
        return out

    def parameters(self) -> dict[str, Tensor]:
        out = self.extractor_parameters()
        for head in self.heads.values():
            out.update(head.parameters())
        return out

    def extract_features(self, images) -> Tensor:
        x = T.as_tensor(images)
        side = self.cfg.image_side
        if x.shape[-3:] != (side, side, 3):
            raise T.ShapeMismatch(f"expected images of shape (.., {side}, {side}, 3), got {x.shape}")
        last = len(self.layers) - 1
        for i, (w, b, stride, pad) in enumerate(self.layers):
            x = T.conv2d(x, w, stride=stride, padding=pad, bias=b)
            if i < last or self.cfg.final_relu:
                x = T.relu(x)
        return x

    def node_output(self, head: PrototypeHead, Z: Tensor) -> NodeOutput:
        scores = prototype_scores(head, Z)
        pooled = pool_scores(scores)
        return NodeOutput(scores, pooled, node_logits(head, pooled))

    def forward(self, images) -> "OrderedDict[int, NodeOutput]":
        Z = self.extract_features(images)
        return OrderedDict((n, self.node_output(h, Z)) for n, h in self.heads.items())

    def forward_pair(self, first, second) -> "OrderedDict[int, tuple[NodeOutput, NodeOutput]]":
        """Run both augmentations; each image goes through the extractor once."""
        outs = OrderedDict()
        for which in (first, second):
            for n, o in self.forward(which).items():
                outs.setdefault(n, []).append(o)
        return OrderedDict((n, tuple(v)) for n, v in outs.items())

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.parameters().items())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)}")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise T.ShapeMismatch(f"{k}: checkpoint {a.shape}, model {p.shape}")
            p.data = a.copy()


def build_model(tree: Phylogeny, cfg: ModelConfig, seed: int | None = None) -> Model:
    """Seeded initialization: normal(0, init_std) extractor and prototypes."""
    if not tree.internal:
        raise TrivialTree("tree has no internal node")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    model = Model(tree, cfg)
    cin = 3
    for spec in cfg.extractor:
        w = Tensor(rng.normal(0.0, cfg.init_std, (spec.kernel, spec.kernel, cin, spec.channels)), True)
        b = Tensor(np.zeros(spec.channels), True)
        model.layers.append((w, b, spec.stride, spec.kernel // 2))
        cin = spec.channels
    for n in tree.internal:
        nc = len(tree.children(n))
        prototype_budget(tree, n, cfg.beta)
        model.heads[n] = PrototypeHead(n, nc, cfg.beta, cin, rng, cfg.init_std)
    for name, p in model.parameters().items():
        p.name = name
    return model


def forward(model: Model, images, second=None):
    if second is None:
        return model.forward(images)
    return model.forward_pair(images, second)


def extract_features(model: Model, image) -> Tensor:
    return model.extract_features(image)
