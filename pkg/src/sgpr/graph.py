"""Semantic instance extraction and fixed-capacity semantic graphs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .dataset import PointCloud
from .errors import ContractError, ParseError, ValidationError

IGNORED = -1
NUM_CLASSES = 12

CLASS_NAMES = (
    "car", "bicycle", "motorcycle", "truck", "other-vehicle", "building",
    "fence", "vegetation", "trunk", "terrain", "pole", "traffic-sign",
)

# SemanticKITTI raw code -> merged class name; absent codes are ignored.
SEMANTIC_KITTI_MERGE = {
    10: "car", 252: "car",
    11: "bicycle",
    15: "motorcycle",
    18: "truck", 258: "truck",
    13: "other-vehicle", 16: "other-vehicle", 20: "other-vehicle",
    256: "other-vehicle", 257: "other-vehicle", 259: "other-vehicle",
    50: "building",
    51: "fence",
    70: "vegetation",
    71: "trunk",
    72: "terrain",
    80: "pole",
    81: "traffic-sign",
}
# person, riders, ground surfaces, outliers and misc structures
SEMANTIC_KITTI_IGNORED = (0, 1, 30, 31, 32, 40, 44, 48, 49, 52, 60, 99, 253, 254, 255)

DEFAULT_RADIUS = {
    "pole": 0.5, "traffic-sign": 0.5, "trunk": 0.5, "bicycle": 0.5, "motorcycle": 0.5,
    "car": 1.0, "truck": 1.0, "other-vehicle": 1.0, "vegetation": 1.0,
    "building": 2.0, "fence": 2.0, "terrain": 2.0,
}
DEFAULT_MIN_SIZE = 10


@dataclass(frozen=True)
class ClassMap:
    raw_to_merged: Mapping[int, int]
    class_names: tuple[str, ...] = CLASS_NAMES
    cluster_radius: tuple[float, ...] = tuple(DEFAULT_RADIUS[n] for n in CLASS_NAMES)
    min_cluster_size: tuple[int, ...] = (DEFAULT_MIN_SIZE,) * NUM_CLASSES

    def __post_init__(self):
        for name, seq in (("class_names", self.class_names), ("cluster_radius", self.cluster_radius),
                          ("min_cluster_size", self.min_cluster_size)):
            if len(seq) != NUM_CLASSES:
                raise ValidationError(f"{name} needs {NUM_CLASSES} entries, got {len(seq)}")
        for code, target in self.raw_to_merged.items():
            if target != IGNORED and not 0 <= target < NUM_CLASSES:
                raise ValidationError(f"raw code {code} maps to invalid class {target}")
        if any(r <= 0 for r in self.cluster_radius):
            raise ValidationError("cluster radii must be positive")

    @classmethod
    def semantic_kitti(cls) -> "ClassMap":
        index = {n: i for i, n in enumerate(CLASS_NAMES)}
        mapping = {code: index[name] for code, name in SEMANTIC_KITTI_MERGE.items()}
        mapping.update({code: IGNORED for code in SEMANTIC_KITTI_IGNORED})
        return cls(mapping)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ClassMap":
        """Build from ``{classes: [{name, radius, min_size}], map: {code: name|null}}``."""
        try:
            classes = doc["classes"]
            names = tuple(c["name"] for c in classes)
            radii = tuple(float(c.get("radius", 1.0)) for c in classes)
            sizes = tuple(int(c.get("min_size", DEFAULT_MIN_SIZE)) for c in classes)
            index = {n: i for i, n in enumerate(names)}
            mapping = {}
            for code, name in doc["map"].items():
                if name is None or name == "ignored":
                    mapping[int(code)] = IGNORED
                elif name in index:
                    mapping[int(code)] = index[name]
                else:
                    raise ValidationError(f"raw code {code} maps to unknown class {name!r}", "map")
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed class map: missing {exc}") from None
        return cls(mapping, names, radii, sizes)

    @classmethod
    def from_file(cls, path) -> "ClassMap":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ParseError(str(exc), str(path)) from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "classes": [{"name": n, "radius": r, "min_size": s} for n, r, s in
                        zip(self.class_names, self.cluster_radius, self.min_cluster_size)],
            "map": {int(c): (None if t == IGNORED else self.class_names[t])
                    for c, t in sorted(self.raw_to_merged.items())},
        }

    def lookup_table(self) -> np.ndarray:
        table = np.full(1 << 16, IGNORED, dtype=np.int64)
        for code, target in self.raw_to_merged.items():
            table[code] = target
        return table


def merge_class(raw_code: int, cmap: ClassMap) -> int:
    """Merged class index for a raw semantic code, or ``IGNORED``."""
    return int(cmap.raw_to_merged.get(int(raw_code), IGNORED))


@dataclass
class Instance:
    cls: int
    point_indices: np.ndarray
    centroid: tuple[float, float, float]

    @property
    def size(self) -> int:
        return len(self.point_indices)


_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                     if (i, j, k) > (0, 0, 0)], dtype=np.int64)


def _radius_edges(points: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """All index pairs within ``radius``, found through a hash grid of cell size ``radius``."""
    cells = np.floor(points / radius).astype(np.int64)
    cells -= cells.min(axis=0)
    dims = cells.max(axis=0) + 3
    key = lambda c: ((c[:, 0] + 1) * dims[1] + (c[:, 1] + 1)) * dims[2] + (c[:, 2] + 1)  # noqa: E731
    keys = key(cells)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    r2 = radius * radius
    src, dst = [], []

    def pairs_between(a_idx, b_keys, same):
        lo = np.searchsorted(sorted_keys, b_keys, side="left")
        hi = np.searchsorted(sorted_keys, b_keys, side="right")
        counts = hi - lo
        if not counts.any():
            return
        a = np.repeat(a_idx, counts)
        starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
        b = order[np.arange(counts.sum()) + starts]
        keep = (a < b) if same else np.ones(len(a), dtype=bool)
        a, b = a[keep], b[keep]
        d2 = ((points[a] - points[b]) ** 2).sum(axis=1)
        close = d2 <= r2
        src.append(a[close])
        dst.append(b[close])

    everyone = np.arange(len(points))
    # chunked to bound the candidate list on dense cells
    for chunk in np.array_split(everyone, max(1, len(points) // 4096)):
        pairs_between(chunk, keys[chunk], same=True)
        for off in _OFFSETS:
            pairs_between(chunk, key(cells[chunk] + off), same=False)
    if not src:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(src), np.concatenate(dst)


def single_linkage(points: np.ndarray, radius: float) -> np.ndarray:
    """Component label per point; points chain together when gaps are ≤ ``radius``."""
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    a, b = _radius_edges(points, radius)
    adj = coo_matrix((np.ones(len(a), dtype=np.int8), (a, b)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels


def cluster_instances(cloud: PointCloud, cmap: ClassMap) -> list[Instance]:
    """Euclidean clusters per merged class.

    Instances are ordered by class, then by their lowest point index.
    Clusters smaller than the class's ``min_cluster_size`` are dropped.
    """
    if cloud.raw_labels is None:
        raise ContractError("cluster_instances needs per-point semantic labels")
    merged = cmap.lookup_table()[cloud.raw_labels.astype(np.int64)]
    instances = []
    for c in range(NUM_CLASSES):
        idx = np.flatnonzero(merged == c)
        if len(idx) < max(cmap.min_cluster_size[c], 1):
            continue
        comp = single_linkage(cloud.points[idx], cmap.cluster_radius[c])
        groups = sorted((np.flatnonzero(comp == k) for k in np.unique(comp)), key=lambda g: g[0])
        for g in groups:
            if len(g) < cmap.min_cluster_size[c]:
                continue
            members = idx[g]
            centroid = cloud.points[members].mean(axis=0)
            instances.append(Instance(c, members, tuple(float(v) for v in centroid)))
    return instances


@dataclass
class SemanticGraph:
    """Nodes as ``(class, (x, y, z))`` pairs, largest instance first."""

    nodes: list[tuple[int, tuple[float, float, float]]] = field(default_factory=list)
    capacity: int = 100
    sequence: str = ""
    frame: int = 0

    def __post_init__(self):
        self.nodes = [(int(c), tuple(float(v) for v in xyz)) for c, xyz in self.nodes]
        if len(self.nodes) > self.capacity:
            raise ValidationError(f"{len(self.nodes)} nodes exceed capacity {self.capacity}")
        for i, (c, _) in enumerate(self.nodes):
            if not 0 <= c < NUM_CLASSES:
                raise ValidationError(f"class {c} outside [0, {NUM_CLASSES})", f"nodes[{i}].class")

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def classes(self) -> np.ndarray:
        return np.array([c for c, _ in self.nodes], dtype=np.int64)

    @property
    def centroids(self) -> np.ndarray:
        return np.array([xyz for _, xyz in self.nodes], dtype=np.float64).reshape(-1, 3)

    def descriptor(self) -> np.ndarray:
        """``capacity x 4`` array of (class, x, y, z); unused rows are zero."""
        out = np.zeros((self.capacity, 4))
        if self.nodes:
            out[: len(self), 0] = self.classes
            out[: len(self), 1:] = self.centroids
        return out


def build_graph(instances: list[Instance], capacity: int = 100, sequence: str = "",
                frame: int = 0) -> SemanticGraph:
    """Keep the ``capacity`` largest instances, ordered by descending size."""
    if capacity < 1:
        raise ContractError(f"capacity must be at least 1, got {capacity}")
    # stable sort: equal sizes keep their original order
    order = sorted(range(len(instances)), key=lambda i: -instances[i].size)[:capacity]
    nodes = [(instances[i].cls, instances[i].centroid) for i in order]
    return SemanticGraph(nodes, capacity, sequence, frame)


def graph_from_cloud(cloud: PointCloud, cmap: ClassMap, capacity: int = 100, sequence: str = "",
                     frame: int = 0) -> SemanticGraph:
    return build_graph(cluster_instances(cloud, cmap), capacity, sequence, frame)


def graph_to_dict(graph: SemanticGraph) -> dict:
    return {
        "sequence": graph.sequence,
        "frame": graph.frame,
        "capacity": graph.capacity,
        # repr keeps 17 significant digits, so floats round-trip exactly
        "nodes": [{"class": c, "centroid": [float(repr(v)) for v in xyz]} for c, xyz in graph.nodes],
    }


def graph_from_dict(doc, source: str = "<graph>") -> SemanticGraph:
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object", source)
    for key in ("sequence", "frame", "nodes"):
        if key not in doc:
            raise ParseError(f"missing key {key!r}", source)
    if not isinstance(doc["nodes"], list):
        raise ParseError("'nodes' must be a list", f"{source}:nodes")
    nodes = []
    for i, node in enumerate(doc["nodes"]):
        where = f"{source}:nodes[{i}]"
        try:
            c, xyz = node["class"], node["centroid"]
        except (KeyError, TypeError):
            raise ParseError("node needs 'class' and 'centroid'", where) from None
        if not isinstance(c, int) or isinstance(c, bool):
            raise ValidationError(f"class must be an integer, got {c!r}", where)
        if not 0 <= c < NUM_CLASSES:
            raise ValidationError(f"class {c} outside [0, {NUM_CLASSES})", where)
        if not (isinstance(xyz, list) and len(xyz) == 3 and all(isinstance(v, (int, float)) for v in xyz)):
            raise ValidationError("centroid must be three numbers", where)
        if not all(math.isfinite(v) for v in xyz):
            raise ValidationError("centroid must be finite", where)
        nodes.append((c, tuple(float(v) for v in xyz)))
    capacity = doc.get("capacity", 100)
    return SemanticGraph(nodes, int(capacity), str(doc["sequence"]), int(doc["frame"]))


def write_graph(graph: SemanticGraph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph), indent=1) + "\n")


def read_graph(path) -> SemanticGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    return graph_from_dict(doc, str(path))
