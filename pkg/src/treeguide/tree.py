"""Directed rooted trees with typed edges.

Vertices are relabelled densely in breadth-first order from the root, so the
root is always vertex 0 and children follow insertion order.  The original
labels are kept in ``Tree.labels`` for lookups.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np


class TreeError(ValueError):
    """Raised for structurally invalid trees."""


class EdgeKind(str, enum.Enum):
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class EdgeDynamics:
    kind: EdgeKind
    duration: float | None = None
    num_steps: int | None = None

    def __post_init__(self):
        kind = EdgeKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is EdgeKind.CONTINUOUS:
            if self.duration is None or not self.duration > 0:
                raise TreeError("continuous edge needs a positive duration")
            if self.num_steps is None or int(self.num_steps) < 1:
                raise TreeError("continuous edge needs num_steps >= 1")
            object.__setattr__(self, "duration", float(self.duration))
            object.__setattr__(self, "num_steps", int(self.num_steps))
        elif self.duration is not None or self.num_steps is not None:
            raise TreeError("discrete edge takes no duration or num_steps")

    @classmethod
    def discrete(cls) -> "EdgeDynamics":
        return cls(EdgeKind.DISCRETE)

    @classmethod
    def continuous(cls, duration: float, num_steps: int) -> "EdgeDynamics":
        return cls(EdgeKind.CONTINUOUS, duration, num_steps)

    @property
    def is_continuous(self) -> bool:
        return self.kind is EdgeKind.CONTINUOUS


@dataclass(frozen=True)
class SubsampleScheme:
    """Leaf selection probabilities and the induced edge weights."""

    gamma: Mapping[int, float]
    omega: Mapping[int, float]


@dataclass(frozen=True, eq=False)
class Tree:
    parent: tuple[int, ...]
    children: tuple[tuple[int, ...], ...]
    edge: Mapping[int, EdgeDynamics]
    root_value: np.ndarray
    observations: Mapping[int, np.ndarray] | None
    labels: tuple[Hashable, ...]
    virtual_root: bool = False
    _desc: tuple[frozenset, ...] = field(default=(), repr=False)

    # -- basic structure -------------------------------------------------
    @property
    def size(self) -> int:
        return len(self.parent)

    @property
    def dim(self) -> int:
        return self.root_value.shape[0]

    @property
    def root(self) -> int:
        return 0

    @property
    def nonroot(self) -> tuple[int, ...]:
        return tuple(range(1, self.size))

    @property
    def leaves(self) -> tuple[int, ...]:
        return tuple(v for v in range(self.size) if not self.children[v])

    def is_leaf(self, v: int) -> bool:
        return not self.children[v]

    def index(self, label: Hashable) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise TreeError(f"unknown vertex label {label!r}") from None

    def _check(self, v: int) -> None:
        if not 0 <= v < self.size:
            raise TreeError(f"unknown vertex {v}")

    def depth(self, v: int) -> int:
        self._check(v)
        d = 0
        while v != 0:
            v = self.parent[v]
            d += 1
        return d

    def pre_order(self) -> list[int]:
        out, stack = [], [0]
        while stack:
            v = stack.pop()
            out.append(v)
            stack.extend(reversed(self.children[v]))
        return out

    def post_order(self) -> list[int]:
        return list(reversed([v for v in self._reverse_post()]))

    def _reverse_post(self):
        # reversed post-order == pre-order visiting children right-to-left
        stack = [0]
        while stack:
            v = stack.pop()
            yield v
            stack.extend(self.children[v])

    def levels(self) -> list[list[int]]:
        """Non-root vertices grouped by depth (depth 1 first)."""
        out: list[list[int]] = []
        frontier = list(self.children[0])
        while frontier:
            out.append(frontier)
            frontier = [c for v in frontier for c in self.children[v]]
        return out

    # -- queries ---------------------------------------------------------
    def descendant_leaves(self, v: int) -> frozenset:
        self._check(v)
        return self._desc[v]

    def path_to_leaf(self, leaf: int) -> tuple[int, ...]:
        """Non-root vertices on the path from the root to ``leaf``, root side first."""
        self._check(leaf)
        if not self.is_leaf(leaf):
            raise TreeError(f"vertex {leaf} is not a leaf")
        path = []
        v = leaf
        while v != 0:
            path.append(v)
            v = self.parent[v]
        return tuple(reversed(path))

    def with_observations(self, observations: Mapping[int, np.ndarray]) -> "Tree":
        obs = _check_observations(self, {int(k): v for k, v in observations.items()})
        return Tree(self.parent, self.children, self.edge, self.root_value, obs,
                    self.labels, self.virtual_root, self._desc)

    def with_root_value(self, value) -> "Tree":
        value = np.asarray(value, dtype=float)
        if value.shape != self.root_value.shape:
            raise TreeError("root value dimension mismatch")
        return Tree(self.parent, self.children, self.edge, value, self.observations,
                    self.labels, self.virtual_root, self._desc)

    def require_observations(self) -> Mapping[int, np.ndarray]:
        if self.observations is None:
            raise TreeError("tree has no leaf observations")
        return self.observations


def _check_observations(tree: Tree, obs: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    out = {}
    for leaf in tree.leaves:
        if leaf not in obs:
            raise TreeError(f"leaf {tree.labels[leaf]!r} has no observation")
        y = np.asarray(obs[leaf], dtype=float)
        if y.shape != (tree.dim,):
            raise TreeError(f"observation at leaf {tree.labels[leaf]!r} has shape {y.shape}, expected ({tree.dim},)")
        out[leaf] = y
    extra = set(obs) - set(tree.leaves)
    if extra:
        raise TreeError(f"observations given for non-leaf vertices {sorted(extra)}")
    return out


def build_tree(edges: Sequence[tuple[Hashable, Hashable, EdgeDynamics]],
               root_value,
               observations: Mapping[Hashable, np.ndarray] | None = None,
               *, virtual_root: bool = False) -> Tree:
    """Validate an edge list and build a :class:`Tree`.

    ``observations`` is keyed by the input labels.  Passing ``None`` builds a
    topology-only tree; attach data later with :meth:`Tree.with_observations`.
    """
    root_value = np.asarray(root_value, dtype=float)
    if root_value.ndim != 1:
        raise TreeError("root_value must be a vector")
    parent_of: dict = {}
    kids: dict = {}
    edge_of: dict = {}
    order: list = []

    def touch(x):
        if x not in kids:
            kids[x] = []
            order.append(x)

    for p, c, dyn in edges:
        if not isinstance(dyn, EdgeDynamics):
            raise TreeError(f"edge ({p!r}, {c!r}) lacks EdgeDynamics")
        if p == c:
            raise TreeError(f"self-loop at {p!r}")
        touch(p)
        touch(c)
        if c in parent_of:
            raise TreeError(f"vertex {c!r} has more than one parent")
        parent_of[c] = p
        kids[p].append(c)
        edge_of[c] = dyn
    if not order:
        raise TreeError("empty edge list")
    roots = [x for x in order if x not in parent_of]
    if not roots:
        raise TreeError("cycle detected: no root")
    if len(roots) > 1:
        raise TreeError(f"multiple roots: {roots!r}")
    root = roots[0]

    labels = []
    seen = {root}
    queue = deque([root])
    while queue:
        x = queue.popleft()
        labels.append(x)
        for c in kids[x]:
            if c in seen:
                raise TreeError("cycle detected")
            seen.add(c)
            queue.append(c)
    if len(labels) != len(order):
        raise TreeError("cycle detected: vertices unreachable from the root")

    idx = {x: i for i, x in enumerate(labels)}
    parent = tuple(-1 if x == root else idx[parent_of[x]] for x in labels)
    children = tuple(tuple(idx[c] for c in kids[x]) for x in labels)
    edge = {idx[c]: dyn for c, dyn in edge_of.items()}

    desc: list = [None] * len(labels)
    for v in reversed(range(len(labels))):
        if not children[v]:
            desc[v] = frozenset([v])
        else:
            desc[v] = frozenset().union(*(desc[c] for c in children[v]))

    tree = Tree(parent, children, edge, root_value, None, tuple(labels), virtual_root, tuple(desc))
    if observations is not None:
        obs = {}
        for k, y in observations.items():
            if k not in idx:
                raise TreeError(f"observation for unknown vertex {k!r}")
            obs[idx[k]] = y
        tree = tree.with_observations(obs)
    return tree


def balanced_tree(depth: int, branch: int, dynamics: EdgeDynamics, root_value,
                  observations=None) -> Tree:
    """Balanced tree; labels are already breadth-first integers."""
    edges = []
    frontier, nxt = [0], 1
    for _ in range(depth):
        new = []
        for p in frontier:
            for _ in range(branch):
                edges.append((p, nxt, dynamics))
                new.append(nxt)
                nxt += 1
        frontier = new
    return build_tree(edges, root_value, observations)


def subsample_scheme(tree: Tree, gamma: Mapping[int, float]) -> SubsampleScheme:
    total = sum(gamma.values())
    if set(gamma) != set(tree.leaves) or not np.isclose(total, 1.0, atol=1e-12):
        raise TreeError("gamma must be a probability vector over the leaves")
    omega = {v: float(sum(gamma[l] for l in tree.descendant_leaves(v))) for v in tree.nonroot}
    return SubsampleScheme(dict(gamma), omega)


def subsample_scheme_uniform(tree: Tree) -> SubsampleScheme:
    n = len(tree.leaves)
    gamma = {l: 1.0 / n for l in tree.leaves}
    omega = {v: len(tree.descendant_leaves(v)) / n for v in tree.nonroot}
    return SubsampleScheme(gamma, omega)


def augment_virtual_root(tree: Tree, virtual_value, dynamics: EdgeDynamics | None = None) -> Tree:
    """Put a fixed virtual root above the current root.

    The old root becomes vertex 1 with an incoming edge of the given dynamics
    (a discrete edge by default, whose kernel should then carry the root
    prior, see :func:`treeguide.models.gaussian_prior_kernel`).
    """
    if tree.virtual_root:
        raise TreeError("tree already has a virtual root")
    if -1 in tree.labels:
        raise TreeError("label -1 is reserved for the virtual root")
    dynamics = dynamics or EdgeDynamics.discrete()
    virtual_value = np.asarray(virtual_value, dtype=float)
    if virtual_value.shape != (tree.dim,):
        raise TreeError("virtual root value dimension mismatch")
    edges = [(-1, tree.labels[0], dynamics)]
    edges += [(tree.labels[tree.parent[v]], tree.labels[v], tree.edge[v]) for v in tree.nonroot]
    obs = None
    if tree.observations is not None:
        obs = {tree.labels[l]: y for l, y in tree.observations.items()}
    return build_tree(edges, virtual_value, obs, virtual_root=True)


def random_tree(budget: int, branch_prob: float = 0.5, rng=None, *, dim: int = 1,
                num_steps: int = 50, root_value=None) -> Tree:
    """Grow a random tree with exactly ``budget`` vertices.

    Each step picks a current leaf uniformly; with probability ``branch_prob``
    it gains two children, otherwise one.  A bifurcation that would overshoot
    the budget is turned into an elongation.  Edge durations are
    Uniform(0, 1).
    """
    if budget < 2:
        raise TreeError("budget must be at least 2")
    if not 0.0 <= branch_prob <= 1.0:
        raise TreeError("branch_prob must be a probability")
    rng = np.random.default_rng(rng)
    leaves = [0]
    links = []
    n = 1
    while n < budget:
        i = int(rng.integers(len(leaves)))
        v = leaves[i]
        k = 2 if (rng.random() < branch_prob and budget - n >= 2) else 1
        new = list(range(n, n + k))
        n += k
        links.extend((v, c) for c in new)
        leaves[i:i + 1] = new
    # durations drawn after topology so the topology stream is independent of them
    durations = rng.uniform(0.0, 1.0, size=len(links))
    durations = np.maximum(durations, np.finfo(float).tiny)
    edges = [(p, c, EdgeDynamics.continuous(float(T), num_steps)) for (p, c), T in zip(links, durations)]
    if root_value is None:
        root_value = np.zeros(dim)
    return build_tree(edges, root_value)


# -- serialization -------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def tree_to_dict(tree: Tree) -> dict:
    records = []
    for v in range(tree.size):
        rec = {"id": v, "parent": tree.parent[v] if v else None,
               "kind": None, "duration": None, "num_steps": None}
        if v:
            e = tree.edge[v]
            rec["kind"] = e.kind.value
            if e.is_continuous:
                rec["duration"] = _fmt(e.duration)
                rec["num_steps"] = e.num_steps
        records.append(rec)
    out = {"vertices": records,
           "root_value": [_fmt(x) for x in tree.root_value],
           "virtual_root": tree.virtual_root,
           "observations": None}
    if tree.observations is not None:
        out["observations"] = {str(l): [_fmt(x) for x in y] for l, y in sorted(tree.observations.items())}
    return out


def tree_from_dict(data: dict) -> Tree:
    edges = []
    for rec in data["vertices"]:
        if rec["parent"] is None:
            continue
        if rec["kind"] == EdgeKind.CONTINUOUS.value:
            dyn = EdgeDynamics.continuous(float(rec["duration"]), int(rec["num_steps"]))
        else:
            dyn = EdgeDynamics.discrete()
        edges.append((int(rec["parent"]), int(rec["id"]), dyn))
    obs = None
    if data.get("observations") is not None:
        obs = {int(k): np.array([float(x) for x in y]) for k, y in data["observations"].items()}
    root_value = np.array([float(x) for x in data["root_value"]])
    return build_tree(edges, root_value, obs, virtual_root=bool(data.get("virtual_root", False)))


def dumps_tree(tree: Tree) -> str:
    return json.dumps(tree_to_dict(tree), indent=1)


def loads_tree(text: str) -> Tree:
    return tree_from_dict(json.loads(text))
