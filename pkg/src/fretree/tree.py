"""Scenario trees built from Fréchet quantizers.

Stage-1 nodes come from one Lloyd solve on the base law. Every node keeps a
copy of the base sample extended by the values on its path, so its median is
exact. A node whose value falls below the risk threshold (Group 1) passes a
rescaled copy of its parent's law to its children: the children are the
parent-level quantizer multiplied by the ratio of the node's median to its
parent's median, with unchanged probabilities. Any other node (Group 2)
re-estimates its law from its sample and gets a fresh Lloyd solve.

There is no explicit root node: stage-1 nodes have parent ``None``.
Node ids are assigned breadth-first.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .distributions import (
    FrechetParams,
    SampleState,
    classify,
    gumbel_estimate,
    quick_update,
)
from .errors import (
    BuildError,
    DomainError,
    EstimationError,
    InfiniteMeanError,
    InputError,
    NodeLookupError,
    ParameterError,
)
from .quantize import LloydConfig, Quantization, frechet_view, lloyd_w1, scale

GROUP1, GROUP2 = "G1", "G2"


@dataclass(frozen=True)
class TreeNode:
    id: int
    stage: int
    parent: Optional[int]
    value: float
    prob: float
    group: str
    median: float
    children: tuple = ()
    law: Optional[FrechetParams] = field(default=None, compare=False, repr=False)
    source_law: Optional[FrechetParams] = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {"id": self.id, "stage": self.stage, "parent": self.parent,
                "value": self.value, "prob": self.prob, "group": self.group,
                "median": self.median}


@dataclass(frozen=True)
class ScenarioTree:
    """Immutable tree process; ``nodes[i].id == i``."""

    stages: int
    nodes: tuple
    base_median: float = 1.0
    threshold: Optional[float] = None
    branchiness: Optional[tuple] = None

    # -- structure -------------------------------------------------------
    def node(self, node_id: int) -> TreeNode:
        if not isinstance(node_id, (int, np.integer)) or not 0 <= node_id < len(self.nodes):
            raise NodeLookupError(f"unknown node id {node_id!r}")
        return self.nodes[node_id]

    @property
    def roots(self) -> list:
        return [n for n in self.nodes if n.parent is None]

    def children(self, node_id: Optional[int]) -> list:
        """Children of a node; ``None`` addresses the virtual root."""
        if node_id is None:
            return self.roots
        return [self.nodes[c] for c in self.node(node_id).children]

    def stage_nodes(self, t: int) -> list:
        return [n for n in self.nodes if n.stage == t]

    @property
    def leaves(self) -> list:
        return [n for n in self.nodes if not n.children]

    def path(self, node_id: int) -> list:
        """Nodes from stage 1 down to ``node_id``."""
        out = []
        cur = self.node(node_id)
        while True:
            out.append(cur)
            if cur.parent is None:
                break
            cur = self.nodes[cur.parent]
        return out[::-1]

    def parent_median(self, node: TreeNode) -> float:
        return self.base_median if node.parent is None else self.nodes[node.parent].median

    def sibling_index(self, node: TreeNode) -> int:
        sibs = self.children(node.parent)
        return [s.id for s in sibs].index(node.id)

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        out = {"stages": self.stages, "nodes": [n.to_dict() for n in self.nodes],
               "base_median": self.base_median}
        if self.threshold is not None:
            out["threshold"] = self.threshold
        if self.branchiness is not None:
            out["branchiness"] = [b if isinstance(b, int) else list(b) for b in self.branchiness]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioTree":
        try:
            stages = int(d["stages"])
            raw = sorted(d["nodes"], key=lambda r: int(r["id"]))
            ids = [int(r["id"]) for r in raw]
            if ids != list(range(len(raw))):
                raise InputError("node ids must be 0..n-1")
            kids = {i: [] for i in ids}
            for r in raw:
                if r.get("parent") is not None:
                    p = int(r["parent"])
                    if p not in kids:
                        raise InputError(f"node {r['id']} has unknown parent {p}")
                    kids[p].append(int(r["id"]))
            nodes = tuple(
                TreeNode(id=int(r["id"]), stage=int(r["stage"]),
                         parent=None if r.get("parent") is None else int(r["parent"]),
                         value=float(r["value"]), prob=float(r["prob"]),
                         group=str(r.get("group", GROUP2)), median=float(r.get("median", 1.0)),
                         children=tuple(kids[int(r["id"])]))
                for r in raw)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"malformed tree record: {exc}") from exc
        br = d.get("branchiness")
        return cls(stages=stages, nodes=nodes, base_median=float(d.get("base_median", 1.0)),
                   threshold=d.get("threshold"),
                   branchiness=None if br is None else tuple(
                       b if isinstance(b, int) else tuple(b) for b in br))

    @classmethod
    def from_json(cls, text: str) -> "ScenarioTree":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise InputError(f"tree file is not valid JSON: {exc}") from exc


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BuildSpec:
    """Inputs of a tree build.

    ``branchiness`` holds one entry per stage: an int (same count for every
    node at the previous stage) or a sequence with one count per node of the
    previous stage in breadth-first order.
    """

    base_params: FrechetParams
    base_sample: SampleState
    branchiness: Sequence
    threshold: float = 0.6779
    exposure: Optional[float] = None
    median_fn: Optional[Callable[[SampleState], float]] = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.branchiness) < 1:
            raise DomainError("branchiness needs at least one stage")
        first = self.branchiness[0]
        if not isinstance(first, (int, np.integer)):
            if len(first) != 1:
                raise DomainError("stage 1 has a single parent; give one count")
        for b in self.branchiness:
            counts = [b] if isinstance(b, (int, np.integer)) else list(b)
            if any(int(c) < 1 for c in counts):
                raise DomainError("branchiness entries must be at least 1")
        if not 0 < self.threshold < 1:
            raise DomainError("threshold must lie in (0, 1)")
        if self.exposure is not None and not self.exposure > 0:
            raise DomainError("exposure must be positive")

    @property
    def stages(self) -> int:
        return len(self.branchiness)

    def count(self, stage: int, position: int) -> int:
        """Children count for the ``position``-th node (BFS order) of ``stage - 1``."""
        b = self.branchiness[stage - 1]
        if isinstance(b, (int, np.integer)):
            return int(b)
        return int(b[position])


@dataclass
class _Pending:
    parent: Optional[int]
    sample: SampleState
    median: float
    law: FrechetParams          # law of this node's children
    anchor: FrechetParams       # last re-estimated law this one is a rescaling of
    ratio: float                # law = quick_update(anchor, ratio)
    quant: Optional[Quantization]  # quantizer the node itself was drawn from


def build_tree(spec: BuildSpec, config: LloydConfig = LloydConfig()) -> ScenarioTree:
    """Forward construction of a scenario tree (see module docstring)."""
    median_of = spec.median_fn or (lambda s: s.xs)
    cache: dict = {}

    def quantizer(anchor: FrechetParams, n: int, init=None) -> Quantization:
        key = (anchor.lam, anchor.u, anchor.epsilon, n)
        if key not in cache:
            cfg = config if init is None else LloydConfig(
                init=tuple(init), max_iters=config.max_iters, rel_tol=config.rel_tol,
                multistart=config.multistart, seed=config.seed)
            cache[key] = lloyd_w1(frechet_view(anchor), n, cfg)
        return cache[key]

    if spec.base_params.lam >= 1:
        raise BuildError(f"base law has infinite mean (lambda={spec.base_params.lam})")
    root = _Pending(parent=None, sample=spec.base_sample, median=median_of(spec.base_sample),
                    law=spec.base_params, anchor=spec.base_params, ratio=1.0, quant=None)

    records: list = []
    kids: dict = {}
    frontier = [(None, root)]
    for stage in range(1, spec.stages + 1):
        next_frontier = []
        for position, (pid, pend) in enumerate(frontier):
            n = spec.count(stage, position)
            q = quantizer(pend.anchor, n)
            if pend.ratio != 1.0:
                q = scale(q, pend.ratio)
            kid_ids = []
            for value, prob in zip(q.points, q.probabilities):
                nid = len(records)
                value = float(value)
                klass = classify(pend.sample, pend.law, value, spec.threshold)
                sample = pend.sample.append(value)
                median = float(median_of(sample))
                child = _Pending(parent=pid, sample=sample, median=median, law=pend.law,
                                 anchor=pend.anchor, ratio=pend.ratio, quant=q)
                if stage < spec.stages:
                    child = _child_law(child, pend, klass.group, nid, stage, spec, quantizer)
                records.append(dict(id=nid, stage=stage, parent=pid, value=value,
                                    prob=float(prob), group=klass.group, median=median,
                                    law=child.law if stage < spec.stages else None,
                                    source_law=pend.law))
                kid_ids.append(nid)
                next_frontier.append((nid, child))
            kids[pid] = kid_ids
        frontier = next_frontier

    nodes = tuple(
        TreeNode(id=r["id"], stage=r["stage"], parent=r["parent"], value=r["value"],
                 prob=r["prob"], group=r["group"], median=r["median"],
                 children=tuple(kids.get(r["id"], ())), law=r["law"], source_law=r["source_law"])
        for r in records)
    br = tuple(b if isinstance(b, (int, np.integer)) else tuple(int(c) for c in b)
               for b in spec.branchiness)
    return ScenarioTree(stages=spec.stages, nodes=nodes, base_median=float(root.median),
                        threshold=spec.threshold, branchiness=br)


def _child_law(child: _Pending, parent: _Pending, group: str, nid: int, stage: int,
               spec: BuildSpec, quantizer) -> _Pending:
    ratio = child.median / parent.median
    if group == GROUP1:
        child.ratio = parent.ratio * ratio
        child.law = quick_update(parent.law, ratio)
        return child
    try:
        law = gumbel_estimate(child.sample)
    except (EstimationError, ParameterError) as exc:
        raise BuildError(f"re-estimation failed at node {nid} (stage {stage}): {exc}") from exc
    if law.lam >= 1:
        raise BuildError(f"node {nid} (stage {stage}): re-estimated law has infinite mean "
                         f"(lambda={law.lam:.6g})") from InfiniteMeanError(law.lam)
    child.law, child.anchor, child.ratio = law, law, 1.0
    # warm start from the parent-level quantizer, rescaled by the median ratio
    n_next = spec.count(stage + 1, 0) if isinstance(spec.branchiness[stage], (int, np.integer)) else None
    if child.quant is not None and n_next == child.quant.n:
        quantizer(law, n_next, init=child.quant.points * ratio)
    return child


# --------------------------------------------------------------------------
# Manual trees (fixtures, tests, toy instances)
# --------------------------------------------------------------------------


def tree_from_nested(children, base_median: float = 1.0, threshold: Optional[float] = None) -> ScenarioTree:
    """Build a tree from nested records ``(value, prob, [children...])``.

    A record may carry optional fourth and fifth items: the group tag and the
    node median (defaults ``"G2"`` and ``1.0``).
    """
    records = []
    kids: dict = {}
    frontier = [(None, 0, list(children))]
    depth = 0
    while frontier:
        nxt = []
        for pid, stage, items in frontier:
            ids = []
            for item in items:
                value, prob, sub = item[0], item[1], list(item[2]) if len(item) > 2 else []
                group = item[3] if len(item) > 3 else GROUP2
                median = item[4] if len(item) > 4 else 1.0
                nid = len(records)
                records.append(dict(id=nid, stage=stage + 1, parent=pid, value=float(value),
                                    prob=float(prob), group=group, median=float(median)))
                ids.append(nid)
                if sub:
                    nxt.append((nid, stage + 1, sub))
                depth = max(depth, stage + 1)
            kids[pid] = ids
        frontier = nxt
    nodes = tuple(TreeNode(children=tuple(kids.get(r["id"], ())), **r) for r in records)
    return ScenarioTree(stages=depth, nodes=nodes, base_median=float(base_median), threshold=threshold)


# --------------------------------------------------------------------------
# Queries and validation
# --------------------------------------------------------------------------


def path_probability(tree: ScenarioTree, leaf_id: int) -> float:
    """Product of conditional probabilities from stage 1 down to ``leaf_id``."""
    return float(math.prod(n.prob for n in tree.path(leaf_id)))


@dataclass(frozen=True)
class Violation:
    kind: str
    node: Optional[int]
    message: str

    def to_dict(self) -> dict:
        return {"kind": self.kind, "node": self.node, "message": self.message}


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> list:
        return [v.kind for v in self.violations]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": [v.to_dict() for v in self.violations]}


def group1_mass(tree: ScenarioTree, parent: Optional[int]) -> float:
    return float(sum(c.prob for c in tree.children(parent) if c.group == GROUP1))


def validate(tree: ScenarioTree, prob_tol: float = 1e-10, path_tol: float = 1e-9,
             interp_tol: float = 1e-9) -> ValidationReport:
    """Check the tree invariants; violations are collected, never raised."""
    out = []

    def add(kind, node, msg):
        out.append(Violation(kind, node, msg))

    parents = [None] + [n.id for n in tree.nodes if n.children]
    for pid in parents:
        kids = tree.children(pid)
        if not kids:
            continue
        s = sum(k.prob for k in kids)
        if abs(s - 1.0) > prob_tol:
            add("children-sum", pid, f"children probabilities sum to {s:.12g}")
        if any(k.prob < 0 for k in kids):
            add("negative-probability", pid, "negative child probability")
        stage = 1 if pid is None else tree.nodes[pid].stage + 1
        for k in kids:
            if k.stage != stage:
                add("stage", k.id, f"stage {k.stage}, expected {stage}")
        if tree.threshold is not None:
            m = group1_mass(tree, pid)
            cap = tree.threshold + max(k.prob for k in kids)
            if m > cap + prob_tol:
                add("group1-mass", pid, f"Group-1 mass {m:.6g} exceeds {cap:.6g}")

    for leaf in tree.leaves:
        if leaf.stage != tree.stages:
            add("depth", leaf.id, f"leaf at stage {leaf.stage} of {tree.stages}")
    total = sum(path_probability(tree, leaf.id) for leaf in tree.leaves)
    if abs(total - 1.0) > path_tol:
        add("path-sum", None, f"leaf path probabilities sum to {total:.12g}")

    for t in range(1, tree.stages):
        here = len(tree.stage_nodes(t + 1))
        expect = sum(len(n.children) for n in tree.stage_nodes(t))
        if here != expect:
            add("node-count", None, f"stage {t + 1} has {here} nodes, children total {expect}")

    for n in tree.nodes:
        if n.source_law is not None and n.value < n.source_law.epsilon:
            add("support", n.id, f"value {n.value:.6g} below epsilon {n.source_law.epsilon:.6g}")

    for n in tree.nodes:
        if n.group != GROUP1 or not n.children:
            continue
        sibs = tree.children(n.parent)
        kids = tree.children(n.id)
        # persistence: the same sibling index stays in Group 1
        idx = [s.id for s in sibs].index(n.id)
        if idx < len(kids) and kids[idx].group != GROUP1:
            add("group1-persistence", kids[idx].id,
                f"index {idx} is Group 1 at node {n.id} but not at its child")
        # interpolation: children are the parent-level quantizer times the median ratio
        if len(sibs) == len(kids):
            r = n.median / tree.parent_median(n)
            want = np.array([s.value for s in sibs]) * r
            got = np.array([k.value for k in kids])
            err = np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300))
            if err > interp_tol:
                add("interpolation", n.id, f"children differ from scaled parent quantizer by {err:.3g}")
            pw = np.array([s.prob for s in sibs])
            pg = np.array([k.prob for k in kids])
            if np.any(pw != pg):
                add("interpolation", n.id, "children probabilities differ from the parent quantizer")
    return ValidationReport(tuple(out))
