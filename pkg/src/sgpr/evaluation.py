"""Scoring, precision-recall analysis, robustness transforms and report export."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .dataset import PairSet, PointCloud
from .errors import DatasetError, DegenerateEvalError
from .graph import SemanticGraph, read_graph

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Raw-cloud transforms


def azimuth_deg(xy: np.ndarray) -> np.ndarray:
    """Azimuth of each (x, y) in degrees, in [0, 360)."""
    az = np.degrees(np.arctan2(xy[:, 1], xy[:, 0])) % 360.0
    # -0.0 and tiny negatives can round up to exactly 360
    return np.where(az >= 360.0, 0.0, az)


def in_sector(az: np.ndarray, start_deg: float, width_deg: float) -> np.ndarray:
    return ((az - start_deg) % 360.0) < width_deg


def occlude_cloud(cloud: PointCloud, start_deg: float, width_deg: float) -> PointCloud:
    """Drop every point whose azimuth lies in ``[start, start + width)`` (mod 360)."""
    if not 0.0 <= width_deg < 360.0:
        raise ValueError(f"occlusion width must lie in [0, 360), got {width_deg}")
    if width_deg == 0.0:
        return cloud.select(np.arange(len(cloud)))
    hit = in_sector(azimuth_deg(cloud.points[:, :2]), start_deg, width_deg)
    return cloud.select(~hit)


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_cloud(cloud: PointCloud, yaw: float) -> PointCloud:
    """Rotate all points about the z axis by ``yaw`` radians."""
    pts = cloud.points @ yaw_matrix(yaw).T
    labels = None if cloud.raw_labels is None else cloud.raw_labels.copy()
    return PointCloud(pts, cloud.intensities.copy(), labels)


# ---------------------------------------------------------------------------
# Metrics


def pr_curve(scores, labels) -> list[tuple[float, float, float]]:
    """``(threshold, precision, recall)`` at every distinct score, ascending.

    A pair is predicted positive when its score is ``>=`` the threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(s) != len(y):
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise DegenerateEvalError("precision-recall needs both positive and negative labels")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # last position of each distinct score in descending order
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    points = []
    for i in last[::-1]:
        t, f = int(tp[i]), int(fp[i])
        points.append((float(s_sorted[i]), t / (t + f), t / n_pos))
    return points


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def f1_max(pr_points) -> float:
    if not pr_points:
        raise ValueError("f1_max needs at least one operating point")
    return max(f1_score(p, r) for _, p, r in pr_points)


@dataclass
class EvalReport:
    pr_points: list[tuple[float, float, float]]
    f1_max: float
    positives: int
    negatives: int
    config: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores, labels, config: Mapping | None = None) -> "EvalReport":
        pts = pr_curve(scores, labels)
        y = np.asarray(labels)
        return cls(pts, f1_max(pts), int(y.sum()), int(len(y) - y.sum()), dict(config or {}))


# ---------------------------------------------------------------------------
# Scoring


class GraphStore:
    """Graphs keyed by ``(sequence, frame)``, from memory or a graph directory.

    A directory store reads ``<root>/<seq>/<frame:06d>.json`` lazily.
    """

    def __init__(self, graphs: Mapping[tuple[str, int], SemanticGraph] | None = None, root=None):
        self._graphs = dict(graphs or {})
        self.root = None if root is None else Path(root)

    def path(self, seq: str, frame: int) -> Path:
        return self.root / seq / f"{frame:06d}.json"

    def __getitem__(self, key: tuple[str, int]) -> SemanticGraph:
        if key not in self._graphs:
            if self.root is None:
                raise DatasetError(f"no graph for sequence {key[0]} frame {key[1]}")
            path = self.path(*key)
            if not path.is_file():
                raise DatasetError(f"missing graph file for sequence {key[0]} frame {key[1]}: {path}")
            self._graphs[key] = read_graph(path)
        return self._graphs[key]

    def __contains__(self, key) -> bool:
        return key in self._graphs or (self.root is not None and self.path(*key).is_file())

    def __setitem__(self, key, graph: SemanticGraph) -> None:
        self._graphs[key] = graph

    def keys(self):
        return self._graphs.keys()


def score_all(params, config, pairs: PairSet, graphs: GraphStore, batch_size: int = 128):
    """Score every pair; returns ``[(entry, score), ...]`` in pair order."""
    from .model import score_graph_pairs

    graph_pairs = []
    for a, b, _ in pairs.entries:
        ga, gb = graphs[(a.sequence, a.frame)], graphs[(b.sequence, b.frame)]
        for g in (ga, gb):
            if len(g) > config.capacity:
                raise DatasetError(f"graph {g.sequence}/{g.frame} has {len(g)} nodes > capacity {config.capacity}")
        graph_pairs.append((ga, gb))
    if not graph_pairs:
        return []
    # empty graphs cannot be embedded; they score as non-matches
    usable = [i for i, (ga, gb) in enumerate(graph_pairs) if len(ga) and len(gb)]
    scores = np.zeros(len(graph_pairs))
    if len(usable) < len(graph_pairs):
        logger.warning("%d pairs involve empty graphs and score 0", len(graph_pairs) - len(usable))
    if usable:
        scores[usable] = score_graph_pairs([graph_pairs[i] for i in usable], params, config, batch_size)
    return list(zip(pairs.entries, scores.tolist()))


def evaluate(params, config, pairs: PairSet, graphs: GraphStore, batch_size: int = 128,
             echo: Mapping | None = None) -> EvalReport:
    scored = score_all(params, config, pairs, graphs, batch_size)
    scores = [s for _, s in scored]
    labels = [lab for (_, _, lab), _ in scored]
    cfg = {"pos_thresh": pairs.pos_thresh, "neg_thresh": pairs.neg_thresh,
           "min_time_gap": pairs.min_time_gap, "mode": pairs.mode}
    cfg.update(echo or {})
    return EvalReport.from_scores(scores, labels, cfg)


def similarity_matrix(params, config, query: tuple[str, int], frames: list[int],
                      graphs: GraphStore, batch_size: int = 128) -> list[tuple[int, float]]:
    """Score the query scan against every frame of its sequence, in frame order."""
    from .model import score_graph_pairs

    seq, qframe = query
    q = graphs[(seq, qframe)]
    rows = sorted(frames)
    targets = [graphs[(seq, f)] for f in rows]
    scores = np.zeros(len(rows))
    usable = [i for i, g in enumerate(targets) if len(g)] if len(q) else []
    if usable:
        scores[usable] = score_graph_pairs([(q, targets[i]) for i in usable], params, config, batch_size)
    return list(zip(rows, scores.tolist()))


def write_similarity_csv(path, rows: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "score"])
        for frame, score in rows:
            w.writerow([frame, repr(float(score))])


# ---------------------------------------------------------------------------
# Report files


def write_pr_csv(path, pr_points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in pr_points:
            w.writerow([repr(float(t)), repr(float(p)), repr(float(r))])


def read_pr_csv(path) -> list[tuple[float, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(float(t), float(p), float(r)) for t, p, r in reader]


def pr_svg(pr_points, title: str = "Precision-Recall", size: int = 400) -> str:
    """Standalone SVG line plot of precision against recall."""
    pad = 50
    inner = size - 2 * pad
    pts = sorted(((r, p) for _, p, r in pr_points))
    coords = " ".join(f"{pad + r * inner:.2f},{pad + (1 - p) * inner:.2f}" for r, p in pts)
    ticks = []
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        x = pad + v * inner
        y = pad + (1 - v) * inner
        ticks.append(f'<text x="{x:.1f}" y="{size - pad + 18}" font-size="11" text-anchor="middle">{v:g}</text>')
        ticks.append(f'<text x="{pad - 8}" y="{y + 4:.1f}" font-size="11" text-anchor="end">{v:g}</text>')
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>',
        *ticks,
        f'<text x="{size / 2}" y="{pad - 15}" font-size="14" text-anchor="middle">{title}</text>',
        f'<text x="{size / 2}" y="{size - 10}" font-size="12" text-anchor="middle">Recall</text>',
        f'<text x="15" y="{size / 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 15 {size / 2})">Precision</text>',
        f'<polyline points="{coords}" fill="none" stroke="#1f77b4" stroke-width="2"/>',
        "</svg>",
        "",
    ])


def emit_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """Write ``pr.csv``, ``summary.txt`` and ``pr.svg`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"pr": out / "pr.csv", "summary": out / "summary.txt", "plot": out / "pr.svg"}
    write_pr_csv(paths["pr"], report.pr_points)
    lines = [
        f"f1_max={report.f1_max!r}",
        f"positives={report.positives}",
        f"negatives={report.negatives}",
        f"points={len(report.pr_points)}",
        f"config={json.dumps(report.config, sort_keys=True)}",
    ]
    paths["summary"].write_text("\n".join(lines) + "\n")
    paths["plot"].write_text(pr_svg(report.pr_points, f"PR curve (F1 max {report.f1_max:.3f})"))
    return paths


def read_summary(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out
