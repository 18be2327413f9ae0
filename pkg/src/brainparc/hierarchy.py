"""Label trees and the hierarchical Softmax.

Scores are arrays whose last axis indexes the non-root tree nodes in
``tree.ids`` order.  Every sibling group is normalised with its own Softmax,
and the probability of a node is the product of the conditionals along its
path from the (virtual) root.  All computations run in log space.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import SchemaError

ROOT_MARKERS = ("root", "-", "")


@dataclass(frozen=True)
class Node:
    id: int
    parent: int | None  # None means child of the virtual root
    level: int
    name: str = ""


def validate_tree(rows):
    """Check raw ``(id, parent, level_or_None, name)`` rows.

    Returns a list of ``(node_id, reason)`` violations; empty means valid.
    """
    violations = []
    parents = {}
    declared = {}
    for node_id, parent, level, _ in rows:
        if node_id in parents:
            violations.append((node_id, "duplicate id"))
            continue
        parents[node_id] = parent
        declared[node_id] = level
    if not parents:
        return [(None, "tree has no nodes")]
    if not any(p is None for p in parents.values()):
        violations.append((None, "no node is attached to the root"))

    levels = {}
    for node_id in parents:
        seen = []
        cur = node_id
        while cur is not None and cur not in levels:
            if cur in seen:
                violations.append((node_id, "cycle in parent links"))
                break
            if cur not in parents:
                violations.append((seen[-1] if seen else node_id, f"unknown parent {cur}"))
                break
            seen.append(cur)
            cur = parents[cur]
        else:
            base = 0 if cur is None else levels[cur]
            for depth, n in enumerate(reversed(seen), start=1):
                levels[n] = base + depth

    for node_id, level in declared.items():
        if level is None or node_id not in levels:
            continue
        if level < 1:
            violations.append((node_id, f"level {level} < 1"))
        elif level != levels[node_id]:
            parent = parents[node_id]
            violations.append(
                (node_id, f"declared level {level} but parent {parent if parent is not None else 'root'} "
                          f"is at level {levels[node_id] - 1}")
            )
    return violations


class LabelTree:
    """Immutable rooted label tree with precomputed index structures."""

    def __init__(self, nodes):
        rows = [(n.id, n.parent, n.level, n.name) for n in nodes]
        problems = validate_tree(rows)
        if problems:
            node_id, reason = problems[0]
            raise SchemaError(f"node {node_id}: {reason}", node_id)
        self.nodes = tuple(nodes)
        self.ids = np.array([n.id for n in nodes], dtype=np.int64)
        self.names = [n.name for n in nodes]
        self.index = {int(i): k for k, i in enumerate(self.ids)}
        self.size = len(nodes)
        self.parent_index = np.array([-1 if n.parent is None else self.index[n.parent] for n in nodes])
        self.level = np.array([n.level for n in nodes])
        self.depth = int(self.level.max())

        self.children = [[] for _ in range(self.size)]
        root_children = []
        for k, p in enumerate(self.parent_index):
            (root_children if p < 0 else self.children[p]).append(k)
        self.root_children = root_children
        groups = [root_children] + [c for c in self.children if c]
        self.groups = [np.array(g) for g in groups]
        self.frontier = np.array([k for k in range(self.size) if not self.children[k]])

        # path[j, a] = 1 when node a lies on the root path of j (j included)
        path = np.zeros((self.size, self.size))
        for j in range(self.size):
            a = j
            while a >= 0:
                path[j, a] = 1.0
                a = self.parent_index[a]
        self.path = path

        # sibling groups laid out contiguously for segmented reductions
        self._perm = np.concatenate(self.groups)
        self._inv_perm = np.argsort(self._perm)
        sizes = np.array([len(g) for g in self.groups])
        self._sizes = sizes
        self._starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self._only_child = np.zeros(self.size, dtype=bool)
        for g in self.groups:
            if len(g) == 1:
                self._only_child[g[0]] = True

    # -- construction -----------------------------------------------------

    @classmethod
    def from_parents(cls, parents, names=None):
        """Build from ``{id: parent_id or None}``; levels are derived."""
        rows = [(i, p, None, "") for i, p in parents.items()]
        problems = validate_tree(rows)
        if problems:
            node_id, reason = problems[0]
            raise SchemaError(f"node {node_id}: {reason}", node_id)
        levels = {}

        def level_of(i):
            if i not in levels:
                p = parents[i]
                levels[i] = 1 if p is None else level_of(p) + 1
            return levels[i]

        names = names or {}
        return cls([Node(i, p, level_of(i), names.get(i, "")) for i, p in parents.items()])

    @classmethod
    def flat(cls, ids):
        return cls.from_parents({i: None for i in ids})

    # -- queries ------------------------------------------------------------

    @property
    def frontier_ids(self):
        return self.ids[self.frontier]

    def path_ids(self, node_id):
        k = self.index[node_id]
        return [int(i) for i in self.ids[np.nonzero(self.path[k])[0]]]

    def find(self, name):
        for n in self.nodes:
            if n.name == name:
                return n.id
        raise KeyError(name)

    def to_text(self):
        lines = ["id\tparent\tlevel\tname"]
        for n in self.nodes:
            lines.append(f"{n.id}\t{'root' if n.parent is None else n.parent}\t{n.level}\t{n.name}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def __len__(self):
        return self.size

    def __repr__(self):
        return f"LabelTree({self.size} nodes, {len(self.frontier)} frontier, depth {self.depth})"


def load_tree(path):
    """Parse a tab-separated tree file with columns ``id, parent[, level], name``.

    Lines starting with ``#`` are ignored; the first non-comment line is the
    column header.  ``root`` (or ``-``) as parent attaches a node to the root.
    """
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise SchemaError("empty tree file")
    cols = [c.strip() for c in lines[0].split("\t")]
    if cols[:2] != ["id", "parent"] or "name" not in cols:
        raise SchemaError(f"unexpected header {cols}; need id, parent, [level,] name")
    has_level = "level" in cols
    rows = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = [p.strip() for p in ln.split("\t")]
        if len(parts) != len(cols):
            raise SchemaError(f"line {lineno}: expected {len(cols)} columns, got {len(parts)}")
        rec = dict(zip(cols, parts))
        try:
            node_id = int(rec["id"])
            parent = None if rec["parent"].lower() in ROOT_MARKERS else int(rec["parent"])
            level = int(rec["level"]) if has_level else None
        except ValueError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from exc
        rows.append((node_id, parent, level, rec["name"]))
    problems = validate_tree(rows)
    if problems:
        node_id, reason = problems[0]
        raise SchemaError(f"node {node_id}: {reason}", node_id)
    if has_level:
        return LabelTree([Node(*r) for r in rows])
    return LabelTree.from_parents({r[0]: r[1] for r in rows}, {r[0]: r[3] for r in rows})


def production_tree():
    """The 133-class (132 regions plus background) seven-level tree."""
    with resources.as_file(resources.files("brainparc") / "data" / "brain_tree.tsv") as p:
        return load_tree(p)


# --------------------------------------------------------------------------
# probabilities


def log_sibling_softmax(scores, tree: LabelTree):
    """Log of p(node | parent) for every node; only children get log 1 = 0."""
    s = np.asarray(scores, dtype=np.float64)
    sp = s[..., tree._perm]
    m = np.maximum.reduceat(sp, tree._starts, axis=-1)
    shifted = sp - np.repeat(m, tree._sizes, axis=-1)
    lse = np.log(np.add.reduceat(np.exp(shifted), tree._starts, axis=-1))
    logc = (shifted - np.repeat(lse, tree._sizes, axis=-1))[..., tree._inv_perm]
    logc[..., tree._only_child] = 0.0
    return logc


def sibling_softmax(scores, tree: LabelTree):
    return np.exp(log_sibling_softmax(scores, tree))


def class_conditional(conditional, tree: LabelTree):
    """Multiply conditionals down each root path (root probability is 1)."""
    p = np.array(conditional, dtype=np.float64, copy=True)
    for lvl in range(2, tree.depth + 1):
        idx = np.nonzero(tree.level == lvl)[0]
        p[..., idx] *= p[..., tree.parent_index[idx]]
    return p


def log_class_conditional(scores, tree: LabelTree):
    """log p(node) straight from raw scores."""
    return log_sibling_softmax(scores, tree) @ tree.path.T


def frontier_log_probs(scores, tree: LabelTree):
    return log_class_conditional(scores, tree)[..., tree.frontier]


def log_probs_backward(scores, grad_logp, tree: LabelTree):
    """Chain ``dL/dlog p(node)`` back to the raw scores."""
    grad_logc = np.asarray(grad_logp) @ tree.path
    cond = sibling_softmax(scores, tree)
    gp = grad_logc[..., tree._perm]
    group_sum = np.repeat(np.add.reduceat(gp, tree._starts, axis=-1), tree._sizes, axis=-1)
    grad = grad_logc - cond * group_sum[..., tree._inv_perm]
    grad[..., tree._only_child] = 0.0
    return grad


# --------------------------------------------------------------------------
# targets and loss


def encode_targets(labels, tree: LabelTree, ancestors=True):
    """Hard target rows for integer label ids.

    With ``ancestors`` the labelled node and every ancestor get 1; otherwise
    only the labelled node.  Unknown ids raise ``KeyError``.
    """
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    try:
        cols = np.array([tree.index[int(u)] for u in uniq])
    except KeyError as exc:
        raise KeyError(f"label id {exc.args[0]} is not in the tree") from None
    table = tree.path if ancestors else np.eye(tree.size)
    return table[cols][inv.reshape(labels.shape)]


def _reduce(per_pixel, reduction):
    if reduction == "none":
        return per_pixel
    if reduction == "sum":
        return per_pixel.sum()
    if reduction == "mean":
        return per_pixel.mean() if per_pixel.ndim else per_pixel
    raise ValueError(f"unknown reduction {reduction!r}")


def hier_ce_loss(scores, target, tree: LabelTree, reduction="mean"):
    """Hierarchical cross entropy ``-sum_nodes t * log p(node)`` per pixel.

    ``reduction`` combines pixels (all leading axes): ``mean``, ``sum`` or ``none``.
    """
    logp = log_class_conditional(scores, tree)
    per_pixel = -(np.asarray(target) * logp).sum(axis=-1)
    return _reduce(per_pixel, reduction)


def hier_ce_grad(scores, target, tree: LabelTree, reduction="mean"):
    """Analytic gradient of :func:`hier_ce_loss` with respect to raw scores."""
    target = np.asarray(target, dtype=np.float64)
    grad = log_probs_backward(scores, -target, tree)
    if reduction == "mean":
        n = int(np.prod(grad.shape[:-1]))
        grad = grad / max(n, 1)
    return grad
