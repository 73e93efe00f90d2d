"""Semantic graph place recognition from labeled LiDAR scans."""

from .dataset import KittiLayout, PairSet, PointCloud, ScanIndex, generate_pairs
from .evaluation import EvalReport, GraphStore, f1_max, occlude_cloud, pr_curve, rotate_cloud
from .graph import ClassMap, SemanticGraph, build_graph, cluster_instances, graph_from_cloud
from .model import ModelConfig, ModelParams, forward_pairs, make_batch
from .training import Checkpoint, TrainConfig, augment_graph, fold_split, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ClassMap", "EvalReport", "GraphStore", "KittiLayout", "ModelConfig", "ModelParams",
    "PairSet", "PointCloud", "ScanIndex", "SemanticGraph", "TrainConfig", "augment_graph", "build_graph",
    "cluster_instances", "f1_max", "fold_split", "forward_pairs", "generate_pairs", "graph_from_cloud",
    "make_batch", "occlude_cloud", "pr_curve", "rotate_cloud", "train",
]
