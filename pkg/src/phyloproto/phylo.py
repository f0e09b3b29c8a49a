"""Newick parsing and clade queries for rooted phylogenies.

Nodes are stored in preorder (root is node 0). Leaves keep their
left-to-right document order, so a species can be referenced either by name
or by its position in ``Phylogeny.leaves``.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field
from typing import Iterator


class PhyloError(ValueError):
    """Base class for tree construction and query errors."""


class NewickSyntaxError(PhyloError):
    pass


class UnbalancedParens(NewickSyntaxError):
    pass


class DuplicateLeafName(PhyloError):
    pass


class EmptyTree(PhyloError):
    pass


class TrivialTree(PhyloError):
    pass


class NotAChild(PhyloError):
    pass


class NodeIsLeaf(PhyloError):
    pass


class InvalidNode(PhyloError, IndexError):
    pass


@dataclass(frozen=True)
class TreeNode:
    kind: str  # "internal" or "leaf"
    parent: int | None
    children: tuple[int, ...]
    name: str | None
    depth: int

    @property
    def is_leaf(self) -> bool:
        return self.kind == "leaf"


# -- tokenizer ---------------------------------------------------------------

_PUNCT = "(),;:"


def _tokenize(text: str) -> Iterator[tuple[str, str]]:
    """Yield (kind, value) tokens; comments and whitespace are dropped."""
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c == "[":
            j = text.find("]", i + 1)
            if j < 0:
                raise NewickSyntaxError("unterminated comment")
            i = j + 1
        elif c in _PUNCT:
            yield c, c
            i += 1
        elif c == "'":
            buf = []
            i += 1
            while True:
                if i >= n:
                    raise NewickSyntaxError("unterminated quoted label")
                if text[i] == "'":
                    if i + 1 < n and text[i + 1] == "'":
                        buf.append("'")
                        i += 2
                        continue
                    i += 1
                    break
                buf.append(text[i])
                i += 1
            yield "label", "".join(buf)
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in _PUNCT + "['":
                j += 1
            yield "label", text[i:j]
            i = j


@dataclass
class _Raw:
    name: str | None = None
    children: list["_Raw"] = field(default_factory=list)


def _parse_raw(text: str) -> _Raw:
    tokens = list(_tokenize(text))
    if not tokens or tokens == [(";", ";")]:
        raise EmptyTree("no tree in input")
    depth = 0
    for kind, _ in tokens:
        if kind == "(":
            depth += 1
        elif kind == ")":
            depth -= 1
            if depth < 0:
                raise UnbalancedParens("unexpected ')'")
    if depth != 0:
        raise UnbalancedParens(f"{depth} unclosed '('")
    if tokens[-1][0] != ";":
        raise NewickSyntaxError("missing terminating ';'")
    if any(k == ";" for k, _ in tokens[:-1]):
        raise NewickSyntaxError("more than one tree in input")

    pos = 0

    def peek() -> str:
        return tokens[pos][0]

    def take() -> tuple[str, str]:
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        return tok

    def suffix(node: _Raw) -> None:
        # optional label then optional ":length"
        if peek() == "label":
            node.name = take()[1]
        if peek() == ":":
            take()
            if peek() != "label":
                raise NewickSyntaxError("missing branch length after ':'")
            value = take()[1]
            try:
                float(value)
            except ValueError:
                raise NewickSyntaxError(f"bad branch length {value!r}") from None

    def subtree() -> _Raw:
        node = _Raw()
        if peek() == "(":
            take()
            node.children.append(subtree())
            while peek() == ",":
                take()
                node.children.append(subtree())
            if take()[0] != ")":
                raise UnbalancedParens("expected ')'")
        suffix(node)
        return node

    root = subtree()
    if peek() != ";":
        raise NewickSyntaxError(f"unexpected token {tokens[pos][1]!r}")
    return root


def _collapse(node: _Raw) -> _Raw:
    while len(node.children) == 1:
        node = node.children[0]
    node.children = [_collapse(c) for c in node.children]
    return node


# -- the tree ----------------------------------------------------------------


class Phylogeny:
    """Immutable rooted tree with cached descendant sets.

    ``nodes`` is in preorder, so ``nodes[0]`` is the root and every parent
    precedes its children.
    """

    def __init__(self, nodes: list[TreeNode]):
        self.nodes: tuple[TreeNode, ...] = tuple(nodes)
        self.root = 0
        self.leaves: tuple[int, ...] = tuple(i for i, n in enumerate(nodes) if n.is_leaf)
        self.internal: tuple[int, ...] = tuple(i for i, n in enumerate(nodes) if not n.is_leaf)
        self.species: tuple[str, ...] = tuple(nodes[i].name for i in self.leaves)
        self.leaf_map: dict[str, int] = {nodes[i].name: i for i in self.leaves}
        self.leaf_position: dict[int, int] = {n: k for k, n in enumerate(self.leaves)}
        self._validate()
        desc: list[frozenset[int]] = [frozenset()] * len(nodes)
        for i in reversed(range(len(nodes))):
            node = nodes[i]
            if node.is_leaf:
                desc[i] = frozenset((i,))
            else:
                desc[i] = frozenset().union(*(desc[c] for c in node.children))
        self._desc = tuple(desc)

    def _validate(self) -> None:
        if not self.leaves:
            raise EmptyTree("tree has no leaves")
        if not self.internal:
            raise TrivialTree("tree has no internal node")
        seen = set()
        for i, node in enumerate(self.nodes):
            if (node.parent is None) != (i == 0):
                raise PhyloError("tree must have exactly one root")
            if node.is_leaf:
                if node.children or not node.name:
                    raise PhyloError(f"leaf {i} must be named and childless")
                if node.name in seen:
                    raise DuplicateLeafName(node.name)
                seen.add(node.name)
            elif len(node.children) < 2:
                raise PhyloError(f"internal node {i} has fewer than two children")

    # basic accessors

    def __len__(self) -> int:
        return len(self.nodes)

    def __repr__(self) -> str:
        return f"Phylogeny({serialize_newick(self)!r})"

    @property
    def n_internal(self) -> int:
        return len(self.internal)

    def check(self, node: int) -> TreeNode:
        try:
            i = operator.index(node)
        except TypeError:
            raise InvalidNode(f"node index {node!r} is not an integer") from None
        if i < 0 or i >= len(self.nodes):
            raise InvalidNode(f"node index {node!r} out of range")
        return self.nodes[i]

    def children(self, node: int) -> tuple[int, ...]:
        return self.check(node).children

    def parent(self, node: int) -> int | None:
        return self.check(node).parent

    def depth(self, node: int) -> int:
        return self.check(node).depth

    def is_leaf(self, node: int) -> bool:
        return self.check(node).is_leaf

    def node_label(self, node: int) -> str:
        """Species name for leaves, ``node<i>`` for internal nodes."""
        n = self.check(node)
        return n.name if n.is_leaf else f"node{node}"

    def leaf(self, species: str) -> int:
        try:
            return self.leaf_map[species]
        except KeyError:
            raise InvalidNode(f"unknown species {species!r}") from None

    def child_position(self, node: int, child: int) -> int:
        kids = self.children(node)
        try:
            return kids.index(child)
        except ValueError:
            raise NotAChild(f"{child} is not a child of {node}") from None

    def descendants(self, node: int) -> frozenset[int]:
        self.check(node)
        return self._desc[node]

    def ancestors(self, node: int) -> list[int]:
        """Internal nodes from the root down to ``node``'s parent."""
        out = []
        p = self.parent(node)
        while p is not None:
            out.append(p)
            p = self.nodes[p].parent
        return out[::-1]


def parse_newick(text: str) -> Phylogeny:
    """Parse one Newick tree; branch lengths and internal labels are dropped.

    Unary chains collapse onto their single child.

    >>> t = parse_newick("((A,B),C);")
    >>> t.n_internal, t.species
    (2, ('A', 'B', 'C'))
    """
    raw = _collapse(_parse_raw(text))
    if not raw.children and raw.name is None:
        raise EmptyTree("no leaves")
    nodes: list[TreeNode] = []

    def visit(r: _Raw, parent: int | None, depth: int) -> int:
        idx = len(nodes)
        nodes.append(None)  # type: ignore[arg-type]
        kids = tuple(visit(c, idx, depth + 1) for c in r.children)
        if kids:
            nodes[idx] = TreeNode("internal", parent, kids, None, depth)
        else:
            if not r.name:
                raise NewickSyntaxError("leaf without a name")
            nodes[idx] = TreeNode("leaf", parent, (), r.name, depth)
        return idx

    visit(raw, None, 0)
    return Phylogeny(nodes)


def read_newick(path) -> Phylogeny:
    with open(path, encoding="utf-8") as fh:
        return parse_newick(fh.read())


_NEEDS_QUOTES = set(_PUNCT + "[]' \t\n")


def _quote(name: str) -> str:
    if any(c in _NEEDS_QUOTES for c in name):
        return "'" + name.replace("'", "''") + "'"
    return name


def serialize_newick(tree: Phylogeny) -> str:
    def emit(i: int) -> str:
        node = tree.nodes[i]
        if node.is_leaf:
            return _quote(node.name)
        return "(" + ",".join(emit(c) for c in node.children) + ")"

    return emit(tree.root) + ";"


def descendant_leaves(tree: Phylogeny, node: int) -> frozenset[int]:
    return tree.descendants(node)


def contrasting_set(tree: Phylogeny, node: int, child: int) -> frozenset[int]:
    """Leaves under ``node`` that are not under ``child``."""
    tree.child_position(node, child)
    return tree.descendants(node) - tree.descendants(child)


def root_path(tree: Phylogeny, leaf: int) -> list[tuple[int, int]]:
    """(internal node, child position) pairs from the root down to ``leaf``."""
    tree.check(leaf)
    path = []
    node = leaf
    while tree.nodes[node].parent is not None:
        parent = tree.nodes[node].parent
        path.append((parent, tree.nodes[parent].children.index(node)))
        node = parent
    return path[::-1]


def prototype_budget(tree: Phylogeny, node: int, beta: int) -> int:
    if tree.is_leaf(node):
        raise NodeIsLeaf(f"node {node} is a leaf")
    if beta < 1:
        raise ValueError("beta must be a positive integer")
    return beta * len(tree.children(node))


def tree_digest(tree: Phylogeny) -> str:
    """Short stable hash of the canonical topology."""
    import hashlib

    return hashlib.sha256(serialize_newick(tree).encode("utf-8")).hexdigest()[:16]
