"""Binary treed partition: prior, structural proposals and bookkeeping.

Regions follow the half-open convention: a split ``(j, s)`` sends
``x_j < s`` left and ``x_j >= s`` right, and the domain's upper face is closed.

Split rules are drawn from a finite candidate set: for a node, the midpoints
between consecutive distinct coordinates (per axis) of the level-1 complete
design points inside the node's region.  The dimension is uniform over axes
with at least one candidate.  A node with no candidate on any axis cannot
split, so it contributes no ``1 - P_split`` factor; with that convention the
prior sums to exactly one over all trees on a given point set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .design import Domain


@dataclass
class Node:
    dim: int = -1
    value: float = 0.0
    left: "Node | None" = None
    right: "Node | None" = None
    leaf_id: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def clone(self) -> "Node":
        if self.is_leaf:
            return Node(leaf_id=self.leaf_id)
        return Node(self.dim, self.value, self.left.clone(), self.right.clone())


class NodeInfo(NamedTuple):
    path: tuple
    node: Node
    lower: np.ndarray
    upper: np.ndarray
    depth: int


class PartitionTree:
    """Binary tree over a :class:`Domain`; leaves carry integer ids."""

    def __init__(self, root: Node, domain: Domain):
        self.root = root
        self.domain = domain

    @classmethod
    def root_only(cls, domain: Domain, leaf_id: int = 0) -> "PartitionTree":
        return cls(Node(leaf_id=leaf_id), domain)

    def clone(self) -> "PartitionTree":
        return PartitionTree(self.root.clone(), self.domain)

    def node(self, path) -> Node:
        n = self.root
        for side in path:
            n = n.left if side == 0 else n.right
        return n

    def replace(self, path, new: Node):
        if not path:
            self.root = new
            return
        parent = self.node(path[:-1])
        if path[-1] == 0:
            parent.left = new
        else:
            parent.right = new

    def walk(self):
        stack = [NodeInfo((), self.root, self.domain.lower.copy(), self.domain.upper.copy(), 0)]
        while stack:
            info = stack.pop()
            yield info
            n = info.node
            if not n.is_leaf:
                up = info.upper.copy()
                up[n.dim] = n.value
                lo = info.lower.copy()
                lo[n.dim] = n.value
                stack.append(NodeInfo(info.path + (1,), n.right, lo, info.upper, info.depth + 1))
                stack.append(NodeInfo(info.path + (0,), n.left, info.lower, up, info.depth + 1))

    def info(self, path) -> NodeInfo:
        for inf in self.walk():
            if inf.path == tuple(path):
                return inf
        raise KeyError(path)

    def leaves(self):
        return [i for i in self.walk() if i.node.is_leaf]

    def internal(self):
        return [i for i in self.walk() if not i.node.is_leaf]

    def prunable(self):
        return [i for i in self.internal() if i.node.left.is_leaf and i.node.right.is_leaf]

    @property
    def leaf_ids(self):
        return [i.node.leaf_id for i in self.leaves()]

    @property
    def n_leaves(self) -> int:
        return len(self.leaves())

    def new_ids(self, k: int):
        top = max(self.leaf_ids) + 1
        return list(range(top, top + k))

    def locate(self, X) -> np.ndarray:
        """Leaf id of every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.domain.check(X, what="query points")
        out = np.empty(len(X), dtype=int)

        def rec(n, idx):
            if n.is_leaf:
                out[idx] = n.leaf_id
                return
            go_left = X[idx, n.dim] < n.value
            rec(n.left, idx[go_left])
            rec(n.right, idx[~go_left])

        rec(self.root, np.arange(len(X)))
        return out

    def key(self):
        """Hashable structure, ignoring leaf ids."""

        def rec(n):
            if n.is_leaf:
                return None
            return (n.dim, n.value, rec(n.left), rec(n.right))

        return rec(self.root)

    def to_dict(self):
        def rec(n):
            if n.is_leaf:
                return {"leaf_id": n.leaf_id}
            return {"dim": n.dim, "value": n.value, "left": rec(n.left), "right": rec(n.right)}

        return rec(self.root)

    @classmethod
    def from_dict(cls, d, domain: Domain) -> "PartitionTree":
        def rec(e):
            if "leaf_id" in e:
                return Node(leaf_id=int(e["leaf_id"]))
            return Node(int(e["dim"]), float(e["value"]), rec(e["left"]), rec(e["right"]))

        return cls(rec(d), domain)

    def __repr__(self):
        return f"PartitionTree(K={self.n_leaves}, {self.key()})"


@dataclass(frozen=True)
class TreePriorConfig:
    zeta: float = 0.5
    d: float = 2.0
    min_points: tuple | None = None

    def __post_init__(self):
        if not 0.0 < self.zeta < 1.0:
            raise ValueError("zeta must lie in (0, 1)")
        if self.d < 0:
            raise ValueError("d must be >= 0")


def split_prob(depth: int, cfg: TreePriorConfig) -> float:
    return cfg.zeta * (1.0 + depth) ** (-cfg.d)


class SplitContext:
    """Data needed to evaluate split rules: points, per-level masks, minimum counts."""

    def __init__(self, points, complete, min_points, domain: Domain):
        self.points = np.asarray(points, dtype=float)
        self.complete = np.asarray(complete, dtype=bool)
        self.min_points = np.asarray(min_points, dtype=int)
        self.domain = domain
        self._cands = {}

    def region_mask(self, lower, upper) -> np.ndarray:
        X = self.points
        below = (X < upper) | ((upper >= self.domain.upper) & (X <= upper))
        return np.all((X >= lower) & below, axis=1)

    def candidates(self, lower, upper):
        key = (tuple(lower), tuple(upper))
        hit = self._cands.get(key)
        if hit is None:
            sub = self.points[self.region_mask(lower, upper)]
            hit = []
            for j in range(self.points.shape[1]):
                u = np.unique(sub[:, j])
                hit.append(0.5 * (u[:-1] + u[1:]))
            self._cands[key] = hit
        return hit

    def log_rule_prob(self, lower, upper, dim, value) -> float:
        cands = self.candidates(lower, upper)
        dims = [j for j, c in enumerate(cands) if len(c)]
        if dim not in dims or not np.any(cands[dim] == value):
            return -math.inf
        return -math.log(len(dims)) - math.log(len(cands[dim]))

    def counts_ok(self, mask) -> bool:
        return bool(np.all((self.complete & mask).sum(axis=1) >= self.min_points))

    def valid_splits(self, lower, upper):
        """``(dim, value)`` pairs whose both children meet ``min_points``."""
        mask = self.region_mask(lower, upper)
        out = []
        for j, cands in enumerate(self.candidates(lower, upper)):
            if not len(cands):
                continue
            ok = np.ones(len(cands), dtype=bool)
            for t in range(self.complete.shape[0]):
                c = np.sort(self.points[self.complete[t] & mask, j])
                left = np.searchsorted(c, cands, side="left")
                ok &= (left >= self.min_points[t]) & (len(c) - left >= self.min_points[t])
            out.extend((j, float(s)) for s in cands[ok])
        return out

    def is_growable(self, lower, upper) -> bool:
        return len(self.valid_splits(lower, upper)) > 0

    def growable(self, tree: PartitionTree):
        return [i for i in tree.leaves() if self.is_growable(i.lower, i.upper)]

    def tree_ok(self, tree: PartitionTree, cfg: TreePriorConfig) -> bool:
        """Every leaf meets ``min_points`` and every rule has prior mass."""
        for info in tree.leaves():
            if not self.counts_ok(self.region_mask(info.lower, info.upper)):
                return False
        return math.isfinite(log_tree_prior(tree, cfg, self))


def log_tree_prior(tree: PartitionTree, cfg: TreePriorConfig, ctx: SplitContext) -> float:
    lp = 0.0
    for info in tree.walk():
        cands = ctx.candidates(info.lower, info.upper)
        can_split = any(len(c) for c in cands)
        p = split_prob(info.depth, cfg)
        n = info.node
        if n.is_leaf:
            if can_split:
                lp += math.log1p(-p)
        else:
            rule = ctx.log_rule_prob(info.lower, info.upper, n.dim, n.value)
            if not math.isfinite(rule):
                return -math.inf
            lp += math.log(p) + rule
    return lp


@dataclass
class GrowProposal:
    tree: PartitionTree
    path: tuple
    parent_id: int
    child_ids: tuple
    depth: int
    n_growable: int
    n_prunable_new: int
    log_rule: float


@dataclass
class PruneProposal:
    tree: PartitionTree
    path: tuple
    merged_id: int
    child_ids: tuple
    depth: int
    n_prunable: int
    n_growable_new: int
    log_rule: float


@dataclass
class StructuralProposal:
    tree: PartitionTree
    kind: str
    path: tuple
    log_q_ratio: float = 0.0
    affected: list = field(default_factory=list)


def _draw_rule(ctx, lower, upper, rng):
    cands = ctx.candidates(lower, upper)
    dims = [j for j, c in enumerate(cands) if len(c)]
    if not dims:
        return None
    j = dims[rng.integers(len(dims))]
    s = float(cands[j][rng.integers(len(cands[j]))])
    return j, s, -math.log(len(dims)) - math.log(len(cands[j]))


def _subtree_leaf_ids(node: Node):
    if node.is_leaf:
        return [node.leaf_id]
    return _subtree_leaf_ids(node.left) + _subtree_leaf_ids(node.right)


def propose_grow(tree, cfg, ctx, rng):
    """Split a uniformly chosen growable leaf with a rule drawn from the prior."""
    growable = ctx.growable(tree)
    if not growable:
        return None
    info = growable[rng.integers(len(growable))]
    j, s, log_rule = _draw_rule(ctx, info.lower, info.upper, rng)
    new = tree.clone()
    node = new.node(info.path)
    ids = new.new_ids(2)
    parent_id = node.leaf_id
    node.dim, node.value, node.leaf_id = j, s, -1
    node.left, node.right = Node(leaf_id=ids[0]), Node(leaf_id=ids[1])
    if not ctx.tree_ok(new, cfg):
        return None
    return GrowProposal(
        new, info.path, parent_id, tuple(ids), info.depth,
        len(growable), len(new.prunable()), log_rule,
    )


def propose_prune(tree, cfg, ctx, rng):
    """Merge the two leaf children of a uniformly chosen prunable node."""
    prunable = tree.prunable()
    if not prunable:
        return None
    info = prunable[rng.integers(len(prunable))]
    n = info.node
    log_rule = ctx.log_rule_prob(info.lower, info.upper, n.dim, n.value)
    new = tree.clone()
    merged = new.new_ids(1)[0]
    new.replace(info.path, Node(leaf_id=merged))
    return PruneProposal(
        new, info.path, merged, (n.left.leaf_id, n.right.leaf_id), info.depth,
        len(prunable), len(ctx.growable(new)), log_rule,
    )


def propose_change(tree, cfg, ctx, rng):
    """Redraw the rule of a uniformly chosen internal node from the prior."""
    internal = tree.internal()
    if not internal:
        return None
    info = internal[rng.integers(len(internal))]
    old = ctx.log_rule_prob(info.lower, info.upper, info.node.dim, info.node.value)
    j, s, new_rule = _draw_rule(ctx, info.lower, info.upper, rng)
    new = tree.clone()
    node = new.node(info.path)
    node.dim, node.value = j, s
    if not ctx.tree_ok(new, cfg):
        return None
    return StructuralProposal(new, "change", info.path, old - new_rule, _subtree_leaf_ids(node))


def _swap_pairs(tree):
    pairs = []
    for info in tree.internal():
        for side in (0, 1):
            child = info.node.left if side == 0 else info.node.right
            if not child.is_leaf:
                pairs.append((info.path, side))
    return pairs


def propose_swap(tree, cfg, ctx, rng):
    """Exchange the rules of a uniformly chosen internal parent/child pair."""
    pairs = _swap_pairs(tree)
    if not pairs:
        return None
    path, side = pairs[rng.integers(len(pairs))]
    return swap_rules(tree, cfg, ctx, path, side)


def swap_rules(tree, cfg, ctx, path, side):
    new = tree.clone()
    parent = new.node(path)
    child = parent.left if side == 0 else parent.right
    parent.dim, child.dim = child.dim, parent.dim
    parent.value, child.value = child.value, parent.value
    if not ctx.tree_ok(new, cfg):
        return None
    return StructuralProposal(new, "swap", tuple(path), 0.0, _subtree_leaf_ids(parent))


def rotations(tree):
    """Eligible ``(path, direction)`` rotations: parent and child split the same axis."""
    out = []
    for info in tree.internal():
        n = info.node
        if not n.left.is_leaf and n.left.dim == n.dim:
            out.append((info.path, "right"))
        if not n.right.is_leaf and n.right.dim == n.dim:
            out.append((info.path, "left"))
    return out


def rotate(tree: PartitionTree, path, direction: str) -> PartitionTree:
    """Binary-search-tree rotation at ``path``; leaf regions are unchanged."""
    new = tree.clone()
    v = new.node(path)
    if direction == "right":
        c = v.left
        lower = Node(v.dim, v.value, c.right, v.right)
        top = Node(c.dim, c.value, c.left, lower)
    else:
        c = v.right
        lower = Node(v.dim, v.value, v.left, c.left)
        top = Node(c.dim, c.value, lower, c.right)
    new.replace(tuple(path), top)
    return new


def propose_rotate(tree, cfg, ctx, rng):
    elig = rotations(tree)
    if not elig:
        return None
    path, direction = elig[rng.integers(len(elig))]
    new = rotate(tree, path, direction)
    if not ctx.tree_ok(new, cfg):
        return None
    back = rotations(new)
    return StructuralProposal(new, "rotate", tuple(path), math.log(len(elig)) - math.log(len(back)), [])
