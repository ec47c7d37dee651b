"""OpenPose-18 skeleton graph, neighbor-set label mappings and partitioned adjacency.

Every strategy assigns each member of a root's neighbor set (the root plus
its edge-adjacent joints) a label in ``[0, K)``.  Stacking one indicator
matrix per label gives the ``(K, V, V)`` adjacency stack consumed by the
spatial graph convolution, where row ``i`` collects the neighbor set of
root ``i``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

NUM_JOINTS = 18

OPENPOSE18_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7), (2, 8), (8, 9),
    (9, 10), (5, 11), (11, 12), (12, 13), (0, 14), (0, 15), (14, 16), (15, 17),
)

JOINT_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder",
    "l_elbow", "l_wrist", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee",
    "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
)


class Strategy(str, enum.Enum):
    """Neighbor-set partition strategies, valued by their public CLI names."""

    UNI_LABEL = "uni"
    DISTANCE = "distance"
    SPATIAL = "spatial"
    FULL_DISTANCE = "full-distance"
    CONNECTION = "connection"
    INDEX = "index"

    @property
    def kernel_size(self) -> int:
        return _KERNEL_SIZES[self]

    @property
    def needs_template(self) -> bool:
        return self in (Strategy.SPATIAL, Strategy.FULL_DISTANCE)

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, Strategy):
            return value
        try:
            return cls(str(value).lower().replace("_", "-"))
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ConfigurationError(f"unknown strategy {value!r}; expected one of {names}") from None


_KERNEL_SIZES = {
    Strategy.UNI_LABEL: 1,
    Strategy.DISTANCE: 2,
    Strategy.SPATIAL: 3,
    Strategy.FULL_DISTANCE: 4,
    Strategy.CONNECTION: 4,
    Strategy.INDEX: 4,
}


@dataclass(frozen=True)
class SkeletonGraph:
    num_nodes: int
    edges: tuple
    adjacency: np.ndarray = field(repr=False)

    @property
    def degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1).astype(int)


@dataclass(frozen=True)
class NeighborSet:
    root: int
    adjacent: tuple

    @property
    def members(self) -> tuple:
        return (self.root,) + self.adjacent


@dataclass(frozen=True)
class LabelMapping:
    """Per-root labels of a partition strategy.

    ``labels[root]`` maps every member of the root's neighbor set (root
    included) to its label.  ``priority_sets[root]`` holds the sorted
    auxiliary sequence that produced the K=4 labels (distances, degrees or
    keypoint indices) and is empty for the other strategies.
    """

    strategy: Strategy
    kernel_size: int
    labels: dict
    priority_sets: dict = field(default_factory=dict)

    def as_json(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "K": self.kernel_size,
            "roots": {
                str(root): {str(member): label for member, label in members.items()}
                for root, members in self.labels.items()
            },
        }


@dataclass(frozen=True)
class PartitionedAdjacency:
    matrices: np.ndarray
    normalized: bool = False

    @property
    def K(self) -> int:
        return self.matrices.shape[0]


def build_openpose18_graph() -> SkeletonGraph:
    adjacency = np.zeros((NUM_JOINTS, NUM_JOINTS), dtype=np.int64)
    for i, j in OPENPOSE18_EDGES:
        adjacency[i, j] = adjacency[j, i] = 1
    adjacency.setflags(write=False)
    return SkeletonGraph(NUM_JOINTS, OPENPOSE18_EDGES, adjacency)


def neighbor_set(g: SkeletonGraph, root: int) -> NeighborSet:
    if not 0 <= root < g.num_nodes:
        raise IndexError(f"root {root} out of range for a {g.num_nodes}-node graph")
    return NeighborSet(int(root), tuple(int(j) for j in np.flatnonzero(g.adjacency[root])))


def _neighbor_sets(g):
    return [neighbor_set(g, root) for root in range(g.num_nodes)]


def _joint_distances(template, num_nodes):
    r = getattr(template, "r", template)
    if r is None:
        raise ConfigurationError("strategy requires a skeleton template with per-joint distances")
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (num_nodes,):
        raise ConfigurationError(f"template must hold {num_nodes} joint distances, got shape {r.shape}")
    missing = np.flatnonzero(~np.isfinite(r))
    if missing.size:
        raise ConfigurationError(f"template has no distance for joint {int(missing[0])}")
    return r


def label_map_unilabel(g: SkeletonGraph) -> LabelMapping:
    labels = {ns.root: {m: 0 for m in ns.members} for ns in _neighbor_sets(g)}
    return LabelMapping(Strategy.UNI_LABEL, 1, labels)


def label_map_distance(g: SkeletonGraph) -> LabelMapping:
    labels = {}
    for ns in _neighbor_sets(g):
        labels[ns.root] = {ns.root: 0, **{m: 1 for m in ns.adjacent}}
    return LabelMapping(Strategy.DISTANCE, 2, labels)


def label_map_spatial(g: SkeletonGraph, template) -> LabelMapping:
    """Three-way split by mean distance to the center of gravity.

    Members as far from cg as the root get label 0, members farther than the
    root get label 1 and members closer than the root get label 2.
    """
    r = _joint_distances(template, g.num_nodes)
    labels = {}
    for ns in _neighbor_sets(g):
        rj = r[ns.root]
        members = {}
        for i in ns.members:
            if r[i] == rj:
                members[i] = 0
            elif rj < r[i]:
                members[i] = 1
            else:
                members[i] = 2
        labels[ns.root] = members
    return LabelMapping(Strategy.SPATIAL, 3, labels)


def _ranked_mapping(g, key):
    # root is label 0; adjacent joints take 1..N in order of (key, joint index)
    labels, priorities = {}, {}
    for ns in _neighbor_sets(g):
        ranked = sorted(ns.adjacent, key=lambda j: (key(j), j))
        labels[ns.root] = {ns.root: 0, **{j: m for m, j in enumerate(ranked, start=1)}}
        priorities[ns.root] = tuple(key(j) for j in ranked)
    return labels, priorities


def label_map_full_distance(g: SkeletonGraph, template) -> LabelMapping:
    r = _joint_distances(template, g.num_nodes)
    labels, priorities = _ranked_mapping(g, lambda j: float(r[j]))
    return LabelMapping(Strategy.FULL_DISTANCE, 4, labels, priorities)


def label_map_connection(g: SkeletonGraph) -> LabelMapping:
    degree = g.degree
    labels, priorities = _ranked_mapping(g, lambda j: -int(degree[j]))
    # stored as degrees (descending), not as the negated sort key
    priorities = {root: tuple(-d for d in seq) for root, seq in priorities.items()}
    return LabelMapping(Strategy.CONNECTION, 4, labels, priorities)


def label_map_index(g: SkeletonGraph) -> LabelMapping:
    labels, priorities = _ranked_mapping(g, lambda j: j)
    return LabelMapping(Strategy.INDEX, 4, labels, priorities)


def label_map(strategy, g: SkeletonGraph | None = None, template=None) -> LabelMapping:
    """Dispatch on a :class:`Strategy` (or its CLI name)."""
    strategy = Strategy.parse(strategy)
    g = g if g is not None else build_openpose18_graph()
    if strategy is Strategy.UNI_LABEL:
        return label_map_unilabel(g)
    if strategy is Strategy.DISTANCE:
        return label_map_distance(g)
    if strategy is Strategy.SPATIAL:
        return label_map_spatial(g, template)
    if strategy is Strategy.FULL_DISTANCE:
        return label_map_full_distance(g, template)
    if strategy is Strategy.CONNECTION:
        return label_map_connection(g)
    return label_map_index(g)


def partitioned_adjacency(g: SkeletonGraph, mapping: LabelMapping) -> PartitionedAdjacency:
    K = mapping.kernel_size
    V = g.num_nodes
    if set(mapping.labels) != set(range(V)):
        raise ConfigurationError("label mapping must cover every node as root")
    matrices = np.zeros((K, V, V), dtype=np.int64)
    for root, members in mapping.labels.items():
        for j, k in members.items():
            if not 0 <= k < K:
                raise RuntimeError(f"label {k} at root {root}, member {j} outside [0, {K})")
            matrices[k, root, j] = 1
    return PartitionedAdjacency(matrices, normalized=False)


def normalize_partitions(pa: PartitionedAdjacency, alpha: float = 0.001) -> PartitionedAdjacency:
    """Divide each row of each partition matrix by ``row_sum + alpha``."""
    if alpha < 0:
        raise ConfigurationError(f"alpha must be non-negative, got {alpha}")
    if pa.normalized:
        raise ConfigurationError("partition stack is already normalized")
    a = pa.matrices.astype(np.float64)
    denom = a.sum(axis=2, keepdims=True) + alpha
    out = np.divide(a, denom, out=np.zeros_like(a), where=denom > 0)
    return PartitionedAdjacency(out, normalized=True)


def build_adjacency(strategy, template=None, alpha: float = 0.001) -> PartitionedAdjacency:
    """Normalized ``(K, 18, 18)`` stack for a strategy on the OpenPose-18 graph."""
    g = build_openpose18_graph()
    return normalize_partitions(partitioned_adjacency(g, label_map(strategy, g, template)), alpha)
