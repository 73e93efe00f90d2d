"""Synthetic labeled LiDAR sequences for end-to-end checks without KITTI.

Each place is a random set of semantic instances (10-70 by default). A
sequence drives past its places once per lap; every visit observes the same
instances from a jittered sensor position with a random heading, and the
revisits additionally lose a random azimuth sector. Places sit 25 m apart
along a line, so all cross-place scan pairs are negatives and all
same-place pairs are positives under the 3 m / 20 m rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import KittiLayout, PointCloud, ScanIndex, write_labels, write_point_cloud
from .graph import CLASS_NAMES, DEFAULT_RADIUS, SEMANTIC_KITTI_MERGE

GROUND_CODE = 40  # road; ignored by the default class map

_CODES_BY_CLASS = {name: sorted(c for c, n in SEMANTIC_KITTI_MERGE.items() if n == name)
                   for name in CLASS_NAMES}


@dataclass(frozen=True)
class SynthConfig:
    places: tuple[int, ...] = (140, 20, 40)  # places per sequence
    revisits: int = 5
    nodes: tuple[int, int] = (10, 70)
    points_per_instance: tuple[int, int] = (15, 30)
    blob_sigma: float = 0.15
    extent: float = 40.0
    position_jitter: float = 1.0
    revisit_occlusion_deg: float = 30.0
    ground_points: int = 200
    place_spacing: float = 25.0
    lap_seconds: float = 100.0
    seed: int = 0


@dataclass
class Place:
    raw_codes: np.ndarray  # (n,) SemanticKITTI code per instance
    centres: np.ndarray  # (n, 3) in the place frame


@dataclass
class SynthSequence:
    name: str
    scans: list[ScanIndex] = field(default_factory=list)
    clouds: list[PointCloud] = field(default_factory=list)
    place_of: list[int] = field(default_factory=list)


def _make_place(rng: np.random.Generator, cfg: SynthConfig) -> Place:
    n = int(rng.integers(cfg.nodes[0], cfg.nodes[1] + 1))
    names = rng.choice(len(CLASS_NAMES), size=n)
    centres = np.zeros((n, 3))
    for i, c in enumerate(names):
        # same-class instances keep clear of each other's clustering radius
        gap = DEFAULT_RADIUS[CLASS_NAMES[c]] + 8 * cfg.blob_sigma
        for _ in range(1000):
            r = cfg.extent * np.sqrt(rng.uniform(0.02, 1.0))
            a = rng.uniform(0, 2 * np.pi)
            p = np.array([r * np.cos(a), r * np.sin(a), rng.uniform(-1.0, 3.0)])
            same = centres[:i][names[:i] == c]
            if not len(same) or np.linalg.norm(same - p, axis=1).min() > gap:
                break
        centres[i] = p
    codes = np.array([rng.choice(_CODES_BY_CLASS[CLASS_NAMES[c]]) for c in names])
    return Place(codes, centres)


def _observe(rng: np.random.Generator, place: Place, cfg: SynthConfig, offset: np.ndarray,
             yaw: float, occlusion: tuple[float, float] | None) -> PointCloud:
    pts, labels = [], []
    for code, centre in zip(place.raw_codes, place.centres):
        m = int(rng.integers(cfg.points_per_instance[0], cfg.points_per_instance[1] + 1))
        pts.append(centre + rng.normal(0.0, cfg.blob_sigma, size=(m, 3)))
        labels.append(np.full(m, code))
    g = cfg.ground_points
    ground = np.column_stack([rng.uniform(-cfg.extent, cfg.extent, (g, 2)), np.full(g, -1.7)])
    pts.append(ground)
    labels.append(np.full(g, GROUND_CODE))
    world = np.concatenate(pts) - offset
    c, s = np.cos(-yaw), np.sin(-yaw)
    local = world @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T
    cloud = PointCloud(local, rng.uniform(0, 1, len(local)), np.concatenate(labels))
    if occlusion is not None:
        from .evaluation import occlude_cloud
        cloud = occlude_cloud(cloud, *occlusion)
    return cloud


def generate(cfg: SynthConfig = SynthConfig()) -> dict[str, SynthSequence]:
    """Sequences ``"00"``, ``"01"``, ... holding ``cfg.places[i]`` places each."""
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for si, n_places in enumerate(cfg.places):
        seq = SynthSequence(f"{si:02d}")
        places = [_make_place(rng, cfg) for _ in range(n_places)]
        dt = cfg.lap_seconds / n_places
        frame = 0
        for lap in range(cfg.revisits + 1):
            for pi, place in enumerate(places):
                r = cfg.position_jitter * np.sqrt(rng.uniform())
                a = rng.uniform(0, 2 * np.pi)
                offset = np.array([r * np.cos(a), r * np.sin(a), 0.0])
                yaw = float(rng.uniform(0, 2 * np.pi))
                occ = None
                if lap and cfg.revisit_occlusion_deg > 0:
                    occ = (float(rng.uniform(0, 360)), float(rng.uniform(0, cfg.revisit_occlusion_deg)))
                cloud = _observe(rng, place, cfg, offset, yaw, occ)
                pos = (pi * cfg.place_spacing + offset[0], offset[1], 0.0)
                seq.scans.append(ScanIndex(seq.name, frame, frame * dt, pos))
                seq.clouds.append(cloud)
                seq.place_of.append(pi)
                frame += 1
        out[seq.name] = seq
    return out


def write_kitti(sequences: dict[str, SynthSequence], root) -> KittiLayout:
    """Write sequences in the KITTI odometry layout (identity rotations in poses)."""
    layout = KittiLayout(root)
    (layout.root / "poses").mkdir(parents=True, exist_ok=True)
    for name, seq in sequences.items():
        for sub in ("velodyne", "labels"):
            (layout.sequence_dir(name) / sub).mkdir(parents=True, exist_ok=True)
        pose_lines, time_lines = [], []
        for scan, cloud in zip(seq.scans, seq.clouds):
            write_point_cloud(layout.velodyne(name, scan.frame), cloud)
            write_labels(layout.label(name, scan.frame), cloud.raw_labels)
            x, y, z = (float(v) for v in scan.position)
            pose_lines.append(f"1 0 0 {x!r} 0 1 0 {y!r} 0 0 1 {z!r}")
            time_lines.append(f"{float(scan.timestamp)!r}")
        layout.poses(name).write_text("\n".join(pose_lines) + "\n")
        layout.times(name).write_text("\n".join(time_lines) + "\n")
    return layout
