"""Categorical emotion trees and the label/probability algebra over them.

A hierarchy file is UTF-8 text with one node per line::

    level<TAB>name<TAB>parent-name

``#`` starts a comment, blank lines are ignored and level-1 nodes write
their parent as ``-``.  Within a level, file order is the index order of
that level's prediction vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import ContractError, HierarchyParseError

SHIPPED = ("binary", "ekman", "mikels", "parrott")


@dataclass(frozen=True)
class EmotionNode:
    id: int
    name: str
    level: int
    parent: int | None
    children: tuple[int, ...] = ()


@dataclass(frozen=True)
class EmotionHierarchy:
    """Rooted multi-level tree of emotion categories.

    ``levels[i]`` lists the node ids of affective level ``i + 1`` in
    canonical order; ``index`` maps a node id to its position in that list.
    """

    nodes: tuple[EmotionNode, ...]
    levels: tuple[tuple[int, ...], ...]
    _by_name: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(len(ids) for ids in self.levels)

    def names(self, level: int) -> list[str]:
        return [self.nodes[i].name for i in self._level(level)]

    def index(self, node_id: int) -> int:
        node = self.nodes[node_id]
        return self.levels[node.level - 1].index(node_id)

    def node_at(self, level: int, idx: int) -> EmotionNode:
        ids = self._level(level)
        if not 0 <= idx < len(ids):
            raise IndexError(f"class index {idx} out of range for level {level} ({len(ids)} classes)")
        return self.nodes[ids[idx]]

    def lookup(self, name: str) -> EmotionNode:
        try:
            return self.nodes[self._by_name[name]]
        except KeyError:
            raise KeyError(f"unknown emotion {name!r}") from None

    def parent_index(self, level: int) -> np.ndarray:
        """For each class at ``level`` (≥ 2), the index of its parent at ``level - 1``."""
        if level < 2:
            raise ContractError("level-1 classes have no parent")
        return np.array([self.index(self.nodes[i].parent) for i in self._level(level)], dtype=np.int64)

    def children_matrix(self, level: int) -> np.ndarray:
        """0/1 matrix A (|C_{level-1}| × |C_level|) with A[j, k] = 1 iff k is a child of j."""
        parents = self.parent_index(level)
        a = np.zeros((len(self.levels[level - 2]), len(parents)))
        a[parents, np.arange(len(parents))] = 1.0
        return a

    def children_of(self, level: int, parent_idx: int | None) -> list[int]:
        """Indices at ``level`` whose parent has index ``parent_idx`` one level up.

        ``parent_idx`` is ignored for level 1, whose classes all hang off the root.
        """
        if level == 1:
            return list(range(len(self._level(1))))
        return [k for k, j in enumerate(self.parent_index(level)) if j == parent_idx]

    def _level(self, level: int) -> tuple[int, ...]:
        if not 1 <= level <= self.depth:
            raise IndexError(f"level {level} outside 1..{self.depth}")
        return self.levels[level - 1]

    def to_text(self) -> str:
        lines = []
        for ids in self.levels:
            for i in ids:
                n = self.nodes[i]
                parent = "-" if n.parent is None else self.nodes[n.parent].name
                lines.append(f"{n.level}\t{n.name}\t{parent}")
        return "\n".join(lines) + "\n"


def parse_hierarchy(text: str) -> EmotionHierarchy:
    """Parse and validate hierarchy text; errors carry the offending line number."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) != 3 or not all(parts):
            raise HierarchyParseError(f"expected 'level<TAB>name<TAB>parent', got {raw!r}", lineno)
        level_s, name, parent = parts
        try:
            level = int(level_s)
        except ValueError:
            raise HierarchyParseError(f"level {level_s!r} is not an integer", lineno) from None
        if level < 1:
            raise HierarchyParseError(f"level must be ≥ 1, got {level}", lineno)
        rows.append((lineno, level, name, parent))
    if not rows:
        raise HierarchyParseError("hierarchy is empty")

    by_name: dict[str, int] = {}
    for i, (lineno, level, name, _) in enumerate(rows):
        if name == "-":
            raise HierarchyParseError("'-' is reserved for the root parent", lineno)
        if name in by_name:
            raise HierarchyParseError(f"duplicate emotion name {name!r}", lineno)
        by_name[name] = i

    depth = max(r[1] for r in rows)
    present = {r[1] for r in rows}
    for lineno, level, _, _ in rows:
        missing = [lv for lv in range(1, level) if lv not in present]
        if missing:
            raise HierarchyParseError(f"level {level} used but level {missing[0]} has no nodes", lineno)

    parents: list[int | None] = []
    for lineno, level, name, parent in rows:
        if level == 1:
            if parent != "-":
                raise HierarchyParseError(f"level-1 node {name!r} must have parent '-'", lineno)
            parents.append(None)
            continue
        if parent == "-":
            raise HierarchyParseError(f"level-{level} node {name!r} needs a parent", lineno)
        if parent not in by_name:
            raise HierarchyParseError(f"parent {parent!r} of {name!r} is not defined", lineno)
        plevel = rows[by_name[parent]][1]
        if plevel != level - 1:
            raise HierarchyParseError(
                f"parent {parent!r} is at level {plevel}, expected level {level - 1}", lineno
            )
        parents.append(by_name[parent])

    children: list[list[int]] = [[] for _ in rows]
    for i, p in enumerate(parents):
        if p is not None:
            children[p].append(i)
    for i, (lineno, level, name, _) in enumerate(rows):
        if level < depth and not children[i]:
            raise HierarchyParseError(f"{name!r} at level {level} has no children (depth is {depth})", lineno)

    nodes = tuple(
        EmotionNode(i, name, level, parents[i], tuple(children[i])) for i, (_, level, name, _) in enumerate(rows)
    )
    levels = tuple(tuple(i for i, r in enumerate(rows) if r[1] == lv) for lv in range(1, depth + 1))
    return EmotionHierarchy(nodes, levels, by_name)


def load_hierarchy(source: str | Path) -> EmotionHierarchy:
    """Load a shipped hierarchy by name (``binary``, ``ekman``, ``mikels``, ``parrott``) or a file path."""
    if isinstance(source, str) and source in SHIPPED:
        text = resources.files("mdan.hierarchies").joinpath(f"{source}.tsv").read_text(encoding="utf-8")
    else:
        text = Path(source).read_text(encoding="utf-8")
    return parse_hierarchy(text)


def leaf_to_path(h: EmotionHierarchy, leaf: int) -> np.ndarray:
    """Per-level class indices (level 1 first) of the ancestor chain of a deepest-level class."""
    node = h.node_at(h.depth, leaf)
    path = [0] * h.depth
    while node is not None:
        path[node.level - 1] = h.index(node.id)
        node = None if node.parent is None else h.nodes[node.parent]
    return np.array(path, dtype=np.int64)


def leaves_to_paths(h: EmotionHierarchy, leaves) -> np.ndarray:
    """Vectorised :func:`leaf_to_path`: N leaf indices → N×depth label paths."""
    leaves = np.asarray(leaves, dtype=np.int64).reshape(-1)
    table = np.stack([leaf_to_path(h, k) for k in range(h.level_sizes[-1])])
    if leaves.size and (leaves.min() < 0 or leaves.max() >= len(table)):
        raise IndexError(f"leaf index out of range for {len(table)} leaves")
    return table[leaves]


def aggregate_to_parent(h: EmotionHierarchy, p, level: int) -> np.ndarray:
    """Sum a distribution over ``level`` into its parents at ``level - 1``.

    Accepts a single vector or an N×|C_level| batch.
    """
    p = np.asarray(p, dtype=np.float64)
    if level < 2:
        raise ContractError("aggregate_to_parent needs level ≥ 2")
    if p.shape[-1] != h.level_sizes[level - 1]:
        raise ContractError(f"distribution has {p.shape[-1]} entries, level {level} has {h.level_sizes[level - 1]}")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ContractError("aggregate_to_parent: input must sum to 1")
    return p @ h.children_matrix(level).T


def violation_count(h: EmotionHierarchy, path) -> int:
    """Number of adjacent level pairs whose predicted child does not descend from the predicted parent."""
    path = np.asarray(path, dtype=np.int64)
    if path.shape != (h.depth,):
        raise ContractError(f"expected one label per level ({h.depth}), got {path.shape}")
    return int(sum(h.parent_index(lv)[path[lv - 1]] != path[lv - 2] for lv in range(2, h.depth + 1)))


def violation_counts(h: EmotionHierarchy, paths) -> np.ndarray:
    """Vectorised :func:`violation_count` over an N×depth array."""
    paths = np.asarray(paths, dtype=np.int64)
    out = np.zeros(len(paths), dtype=np.int64)
    for lv in range(2, h.depth + 1):
        out += h.parent_index(lv)[paths[:, lv - 1]] != paths[:, lv - 2]
    return out


def hierarchical_confusion(h: EmotionHierarchy, truths, predictions, level: int):
    """Confusion counts at ``level`` plus the fraction of errors that cross parent groups.

    Rows are true classes, columns predicted.  The cross-parent fraction is
    ``0.0`` when there are no errors or at level 1.
    """
    truths = np.asarray(truths, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if truths.shape != predictions.shape:
        raise ContractError(f"truths {truths.shape} and predictions {predictions.shape} differ in length")
    k = h.level_sizes[level - 1]
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truths, predictions), 1)
    wrong = truths != predictions
    if level == 1 or not wrong.any():
        return cm, 0.0
    parent = h.parent_index(level)
    cross = parent[truths[wrong]] != parent[predictions[wrong]]
    return cm, float(cross.sum() / wrong.sum())
