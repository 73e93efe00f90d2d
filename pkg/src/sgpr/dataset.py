"""KITTI odometry readers and loop-closure pair mining.

Expected layout under a dataset root::

    sequences/<NN>/velodyne/<frame>.bin
    sequences/<NN>/labels/<frame>.label
    sequences/<NN>/times.txt
    poses/<NN>.txt
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DatasetError,
    DomainError,
    InconsistentDatasetError,
    MalformedFileError,
    MalformedRecordError,
    ParseError,
)

logger = logging.getLogger(__name__)

TRAIN = "train"
EVAL = "eval"


@dataclass
class PointCloud:
    """One LiDAR scan in the sensor frame.

    ``points`` is ``(M, 3)`` float64, ``intensities`` ``(M,)`` and
    ``raw_labels`` an optional ``(M,)`` uint16 array of semantic codes.
    """

    points: np.ndarray
    intensities: np.ndarray
    raw_labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        if len(self.intensities) != len(self.points):
            raise ValueError(f"{len(self.points)} points but {len(self.intensities)} intensities")
        if self.raw_labels is not None:
            self.raw_labels = np.asarray(self.raw_labels, dtype=np.uint16).reshape(-1)
            if len(self.raw_labels) != len(self.points):
                raise ValueError(f"{len(self.points)} points but {len(self.raw_labels)} labels")
        if not np.isfinite(self.points).all():
            raise MalformedRecordError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    def select(self, keep: np.ndarray) -> "PointCloud":
        """Subset of points (boolean mask or indices), labels kept in lockstep."""
        labels = None if self.raw_labels is None else self.raw_labels[keep]
        return PointCloud(self.points[keep], self.intensities[keep], labels)


@dataclass(frozen=True)
class ScanIndex:
    sequence: str
    frame: int
    timestamp: float
    position: tuple[float, float, float]


@dataclass
class PairSet:
    """Labeled scan pairs plus the mining configuration that produced them."""

    entries: list[tuple[ScanIndex, ScanIndex, int]] = field(default_factory=list)
    pos_thresh: float = 3.0
    neg_thresh: float = 20.0
    min_time_gap: float = 30.0
    neg_ratio: float = 1.0
    mode: str = TRAIN
    warning: str | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, _, lab in self.entries], dtype=np.int64)

    def keys(self) -> list[tuple[str, int, int, int]]:
        return [(a.sequence, a.frame, b.frame, lab) for a, b, lab in self.entries]


# ---------------------------------------------------------------------------
# Readers


def read_point_cloud(path) -> PointCloud:
    """Read a KITTI velodyne ``.bin`` file of float32 (x, y, z, intensity) records."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise MalformedFileError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    bad = ~np.isfinite(rec).all(axis=1)
    if bad.any():
        raise MalformedRecordError(f"{path}: record {int(np.argmax(bad))} holds a non-finite value")
    return PointCloud(rec[:, :3], rec[:, 3])


def read_labels(path) -> np.ndarray:
    """Semantic codes (low 16 bits) from a SemanticKITTI ``.label`` file."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise MalformedFileError(f"{path}: size {len(raw)} is not a multiple of 4 bytes")
    words = np.frombuffer(raw, dtype="<u4")
    return (words & 0xFFFF).astype(np.uint16)


def read_scan(path, label_path=None) -> PointCloud:
    cloud = read_point_cloud(path)
    if label_path is not None:
        labels = read_labels(label_path)
        if len(labels) != len(cloud):
            raise InconsistentDatasetError(
                f"{label_path}: {len(labels)} labels for {len(cloud)} points in {path}"
            )
        cloud.raw_labels = labels
    return cloud


def write_point_cloud(path, cloud: PointCloud) -> None:
    rec = np.column_stack([cloud.points, cloud.intensities]).astype("<f4")
    Path(path).write_bytes(rec.tobytes())


def write_labels(path, labels: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(labels, dtype="<u4").tobytes())


def read_poses(poses_path, times_path, sequence: str = "") -> list[ScanIndex]:
    """Scan positions (translation column of each 3x4 pose) and timestamps."""
    pose_lines = [ln for ln in Path(poses_path).read_text().splitlines() if ln.strip()]
    time_lines = [ln for ln in Path(times_path).read_text().splitlines() if ln.strip()]
    if len(pose_lines) != len(time_lines):
        raise InconsistentDatasetError(
            f"{poses_path} has {len(pose_lines)} poses but {times_path} has {len(time_lines)} timestamps"
        )
    scans = []
    for i, (pl, tl) in enumerate(zip(pose_lines, time_lines)):
        tokens = pl.split()
        if len(tokens) != 12:
            raise ParseError(f"expected 12 values, got {len(tokens)}", f"{poses_path}:{i + 1}")
        try:
            m = np.array([float(t) for t in tokens]).reshape(3, 4)
            t = float(tl.strip())
        except ValueError as exc:
            raise ParseError(str(exc), f"{poses_path}:{i + 1}") from None
        scans.append(ScanIndex(sequence, i, t, (float(m[0, 3]), float(m[1, 3]), float(m[2, 3]))))
    for a, b in zip(scans, scans[1:]):
        if b.timestamp <= a.timestamp:
            raise InconsistentDatasetError(f"{times_path}: timestamps not increasing at frame {b.frame}")
    return scans


class KittiLayout:
    """Path helper for a KITTI-odometry style tree."""

    def __init__(self, root):
        self.root = Path(root)

    def sequence_dir(self, seq: str) -> Path:
        return self.root / "sequences" / seq

    def velodyne(self, seq: str, frame: int) -> Path:
        return self.sequence_dir(seq) / "velodyne" / f"{frame:06d}.bin"

    def label(self, seq: str, frame: int) -> Path:
        return self.sequence_dir(seq) / "labels" / f"{frame:06d}.label"

    def times(self, seq: str) -> Path:
        return self.sequence_dir(seq) / "times.txt"

    def poses(self, seq: str) -> Path:
        return self.root / "poses" / f"{seq}.txt"

    def sequences(self) -> list[str]:
        base = self.root / "sequences"
        if not base.is_dir():
            raise DatasetError(f"no sequences directory at {base}")
        return sorted(p.name for p in base.iterdir() if p.is_dir())

    def scans(self, seq: str) -> list[ScanIndex]:
        for p in (self.poses(seq), self.times(seq)):
            if not p.is_file():
                raise DatasetError(f"missing {p}")
        return read_poses(self.poses(seq), self.times(seq), seq)

    def frames(self, seq: str) -> list[int]:
        vdir = self.sequence_dir(seq) / "velodyne"
        if not vdir.is_dir():
            raise DatasetError(f"missing velodyne directory {vdir}")
        return sorted(int(p.stem) for p in vdir.glob("*.bin"))

    def load(self, seq: str, frame: int, with_labels: bool = True) -> PointCloud:
        label = None
        if with_labels:
            label_dir = self.sequence_dir(seq) / "labels"
            if not label_dir.is_dir():
                raise DatasetError(f"missing labels directory {label_dir}")
            label = self.label(seq, frame)
            if not label.is_file():
                raise DatasetError(f"missing label file {label}")
        return read_scan(self.velodyne(seq, frame), label)


# ---------------------------------------------------------------------------
# Pair mining


def pose_distance(a: ScanIndex, b: ScanIndex) -> float:
    if a.sequence != b.sequence:
        raise DomainError(f"cannot compare poses across sequences {a.sequence!r} and {b.sequence!r}")
    return float(np.linalg.norm(np.subtract(a.position, b.position)))


def admissible_pairs(scans: list[ScanIndex], pos_thresh: float, neg_thresh: float,
                     min_time_gap: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(i, j)``, ``i < j``, that qualify as positives and negatives.

    All scans must share one sequence. With ``min_time_gap`` set, positives
    must also be more than that many seconds apart.
    """
    if len({s.sequence for s in scans}) > 1:
        raise DomainError("admissible_pairs expects scans from a single sequence")
    n = len(scans)
    if n < 2:
        empty = np.zeros((0, 2), dtype=np.int64)
        return empty, empty
    pos = np.array([s.position for s in scans], dtype=np.float64)
    t = np.array([s.timestamp for s in scans], dtype=np.float64)
    positives, negatives = [], []
    # one row at a time keeps memory linear in sequence length
    for i in range(n - 1):
        j = np.arange(i + 1, n)
        d = np.linalg.norm(pos[j] - pos[i], axis=1)
        p = d < pos_thresh
        if min_time_gap is not None:
            p &= np.abs(t[j] - t[i]) > min_time_gap
        if p.any():
            positives.append(np.column_stack([np.full(p.sum(), i), j[p]]))
        q = d > neg_thresh
        if q.any():
            negatives.append(np.column_stack([np.full(q.sum(), i), j[q]]))
    cat = lambda xs: np.concatenate(xs).astype(np.int64) if xs else np.zeros((0, 2), dtype=np.int64)  # noqa: E731
    return cat(positives), cat(negatives)


def generate_pairs(scans: list[ScanIndex], pos_thresh: float = 3.0, neg_thresh: float = 20.0,
                   min_time_gap: float = 30.0, neg_ratio: float = 1.0, rng_seed: int = 0,
                   mode: str = TRAIN) -> PairSet:
    """Mine labeled pairs within each sequence.

    Every positive (distance < ``pos_thresh``) is kept; in ``"eval"`` mode
    positives must additionally be more than ``min_time_gap`` seconds apart.
    ``round(neg_ratio * positives)`` negatives (distance > ``neg_thresh``)
    are drawn uniformly without replacement per sequence.
    """
    if not pos_thresh < neg_thresh:
        raise DomainError(f"pos_thresh {pos_thresh} must be below neg_thresh {neg_thresh}")
    if neg_ratio <= 0:
        raise DomainError(f"neg_ratio must be positive, got {neg_ratio}")
    if mode not in (TRAIN, EVAL):
        raise DomainError(f"mode must be {TRAIN!r} or {EVAL!r}, got {mode!r}")
    rng = np.random.default_rng(rng_seed)
    by_seq: dict[str, list[ScanIndex]] = {}
    for s in scans:
        by_seq.setdefault(s.sequence, []).append(s)
    out = PairSet(pos_thresh=pos_thresh, neg_thresh=neg_thresh, min_time_gap=min_time_gap,
                  neg_ratio=neg_ratio, mode=mode)
    for seq in sorted(by_seq):
        group = sorted(by_seq[seq], key=lambda s: s.frame)
        pos, neg = admissible_pairs(group, pos_thresh, neg_thresh,
                                    min_time_gap if mode == EVAL else None)
        n_neg = min(len(neg), int(round(neg_ratio * len(pos))))
        chosen = np.sort(rng.choice(len(neg), size=n_neg, replace=False)) if n_neg else []
        rows = [(i, j, 1) for i, j in pos] + [(neg[c][0], neg[c][1], 0) for c in chosen]
        rows.sort()
        out.entries.extend((group[i], group[j], lab) for i, j, lab in rows)
    if not any(lab for _, _, lab in out.entries):
        out.warning = "no positive pairs found"
        logger.warning("generate_pairs: %s (mode=%s, pos_thresh=%s)", out.warning, mode, pos_thresh)
    return out


def write_pairs(path, pairs: PairSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq", "frame_a", "frame_b", "label"])
        for a, b, lab in pairs.entries:
            w.writerow([a.sequence, a.frame, b.frame, lab])


def read_pairs(path, scans: list[ScanIndex] | None = None) -> PairSet:
    """Load a pairs CSV. Without ``scans`` the ScanIndex entries carry only ids."""
    lookup = {(s.sequence, s.frame): s for s in scans or []}

    def ref(seq, frame):
        if lookup:
            try:
                return lookup[(seq, frame)]
            except KeyError:
                raise DatasetError(f"pairs file references unknown scan {seq}/{frame:06d}") from None
        return ScanIndex(seq, frame, 0.0, (0.0, 0.0, 0.0))

    out = PairSet()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["seq", "frame_a", "frame_b", "label"]:
            raise ParseError(f"unexpected header {header}", f"{path}:1")
        for lineno, row in enumerate(reader, start=2):
            try:
                seq, fa, fb, lab = row
                lab = int(lab)
                if lab not in (0, 1):
                    raise ValueError(f"label must be 0 or 1, got {lab}")
                out.entries.append((ref(seq, int(fa)), ref(seq, int(fb)), lab))
            except ValueError as exc:
                raise ParseError(str(exc), f"{path}:{lineno}") from None
    return out
