"""Supervised training of the pair-similarity network.

Every random draw is derived from ``(seed, epoch)`` or ``(seed, epoch, batch)``,
so a run resumed from a checkpoint replays exactly the batches and
augmentations an uninterrupted run would have seen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .autodiff import Adam, AdamState, Tape, container
from .dataset import PairSet
from .errors import ContractError, DegenerateDatasetError, DomainError, FormatError
from .evaluation import GraphStore, in_sector, pr_curve, f1_max, yaw_matrix
from .graph import SemanticGraph
from .model import ModelConfig, ModelParams, bce_loss, forward_pairs, make_batch, score_graph_pairs

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "sgpr-checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    fold: str | None = None
    augment_yaw: bool = True
    augment_occlusion_deg: float | None = None
    checkpoint_path: str | None = None
    checkpoint_interval: int = 1
    val_max_pairs: int = 512

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be at least 1")
        if self.lr < 0:
            raise ContractError(f"learning rate must be non-negative, got {self.lr}")
        if self.augment_occlusion_deg is not None and not 0 <= self.augment_occlusion_deg < 360:
            raise ContractError("augment_occlusion_deg must lie in [0, 360)")
        if self.checkpoint_interval < 1:
            raise ContractError("checkpoint_interval must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


def fold_split(sequences: Iterable[str], test_seq: str) -> tuple[list[str], list[str]]:
    """Hold out ``test_seq``; everything else is training data."""
    seqs = list(sequences)
    if test_seq not in seqs:
        raise DomainError(f"fold {test_seq!r} is not among the sequences {seqs}")
    train = [s for s in seqs if s != test_seq]
    if not train:
        logger.warning("fold %s leaves no training sequences", test_seq)
    return train, [test_seq]


def augment_graph(graph: SemanticGraph, yaw: float | None = 0.0,
                  occlusion: tuple[float | None, float] | None = None, seed=None) -> SemanticGraph:
    """Rotate centroids about z by ``yaw``, then drop nodes inside an azimuth sector.

    ``yaw=None`` or an occlusion start of ``None`` draws the value uniformly
    from ``seed``. Node order is preserved.
    """
    rng = np.random.default_rng(seed)
    if yaw is None:
        yaw = float(rng.uniform(0.0, 2 * np.pi))
    if not len(graph):
        return SemanticGraph([], graph.capacity, graph.sequence, graph.frame)
    xyz = graph.centroids @ yaw_matrix(yaw).T if yaw else graph.centroids
    keep = np.ones(len(graph), dtype=bool)
    if occlusion is not None:
        start, width = occlusion
        if not 0.0 <= width < 360.0:
            raise ContractError(f"occlusion width must lie in [0, 360), got {width}")
        if start is None:
            start = float(rng.uniform(0.0, 360.0))
        if width > 0:
            az = np.degrees(np.arctan2(xyz[:, 1], xyz[:, 0])) % 360.0
            keep = ~in_sector(np.where(az >= 360.0, 0.0, az), start, width)
    nodes = [(c, tuple(p)) for c, p, k in zip(graph.classes.tolist(), xyz.tolist(), keep) if k]
    return SemanticGraph(nodes, graph.capacity, graph.sequence, graph.frame)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    optimizer: AdamState
    epoch: int
    model_config: ModelConfig
    train_config: TrainConfig
    best_val_f1: float | None = None
    best_epoch: int | None = None
    history: list[tuple[int, float, float | None]] = field(default_factory=list)

    def model_params(self, best: bool = True) -> ModelParams:
        return ModelParams.from_arrays(self.best_params if best else self.params, self.model_config)

    def to_bytes(self) -> bytes:
        tensors = {}
        for prefix, d in (("param", self.params), ("best", self.best_params),
                          ("adam.m", self.optimizer.m), ("adam.v", self.optimizer.v)):
            tensors.update({f"{prefix}/{k}": v for k, v in d.items()})
        opt = self.optimizer
        meta = {
            "kind": CHECKPOINT_KIND,
            "epoch": self.epoch,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "best_val_f1": self.best_val_f1,
            "best_epoch": self.best_epoch,
            "history": [list(h) for h in self.history],
            "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step},
        }
        return container.dumps(tensors, meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        tensors, meta = container.loads(blob)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise FormatError("container does not hold a training checkpoint")
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "best": {}, "adam.m": {}, "adam.v": {}}
        for key, arr in tensors.items():
            prefix, _, name = key.partition("/")
            if prefix not in groups:
                raise FormatError(f"unexpected tensor {key!r} in checkpoint")
            groups[prefix][name] = arr
        mcfg = ModelConfig.from_dict(meta["model_config"])
        # shape validation against the echoed config
        ModelParams.from_arrays(groups["param"], mcfg)
        ModelParams.from_arrays(groups["best"], mcfg)
        a = meta["adam"]
        state = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"], groups["adam.m"], groups["adam.v"])
        history = [(int(e), float(l), None if v is None else float(v)) for e, l, v in meta["history"]]
        return cls(groups["param"], groups["best"], state, int(meta["epoch"]), mcfg,
                   TrainConfig.from_dict(meta["train_config"]), meta["best_val_f1"], meta["best_epoch"], history)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _copy_state(s: AdamState) -> AdamState:
    return AdamState(s.lr, s.beta1, s.beta2, s.eps, s.step,
                     {k: v.copy() for k, v in s.m.items()}, {k: v.copy() for k, v in s.v.items()})


def _check_labels(pairs: PairSet) -> None:
    if not len(pairs):
        raise DegenerateDatasetError("training needs a non-empty pair set")
    y = pairs.labels
    if y.min() == y.max():
        raise DegenerateDatasetError(f"every training pair has label {int(y[0])}; both classes are needed")


def _val_subset(pairs: PairSet, cap: int, seed: int) -> PairSet | None:
    entries = pairs.entries
    if len(entries) > cap:
        pick = np.sort(np.random.default_rng([seed, 0xFA1]).choice(len(entries), cap, replace=False))
        entries = [entries[i] for i in pick]
    labels = {e[2] for e in entries}
    if len(labels) < 2:
        logger.warning("validation subset is single-class; early stopping disabled")
        return None
    return PairSet(entries, pairs.pos_thresh, pairs.neg_thresh, pairs.min_time_gap, pairs.neg_ratio, pairs.mode)


def validation_f1(params: ModelParams, mcfg: ModelConfig, pairs: PairSet, graphs: GraphStore,
                  batch_size: int) -> float:
    gp = [(graphs[(a.sequence, a.frame)], graphs[(b.sequence, b.frame)]) for a, b, _ in pairs.entries]
    usable = [i for i, (x, y) in enumerate(gp) if len(x) and len(y)]
    scores = np.zeros(len(gp))
    if usable:
        scores[usable] = score_graph_pairs([gp[i] for i in usable], params, mcfg, batch_size)
    return f1_max(pr_curve(scores, pairs.labels))


def _batch_graphs(entries, graphs: GraphStore, cfg: TrainConfig, rng: np.random.Generator):
    """Both sides of each pair, each graph augmented with its own draws."""
    sides: tuple[list, list] = ([], [])
    occl = cfg.augment_occlusion_deg
    for a, b, _ in entries:
        for side, ref in zip(sides, (a, b)):
            g = graphs[(ref.sequence, ref.frame)]
            yaw = float(rng.uniform(0.0, 2 * np.pi)) if cfg.augment_yaw else 0.0
            occ = (float(rng.uniform(0.0, 360.0)), occl) if occl else None
            if yaw or occ:
                aug = augment_graph(g, yaw, occ)
                # an occlusion that empties a graph is skipped for that graph
                g = aug if len(aug) else augment_graph(g, yaw)
            side.append(g)
    return sides


def train(pairs: PairSet, graphs: GraphStore, cfg: TrainConfig = TrainConfig(),
          model_config: ModelConfig = ModelConfig(), val_pairs: PairSet | None = None,
          resume: Checkpoint | None = None,
          on_epoch: Callable[[int, float, float | None], None] | None = None) -> Checkpoint:
    """Run ``cfg.epochs`` epochs of Adam on mean BCE; returns the final checkpoint.

    Pairs touching an empty graph are skipped since an empty graph has no
    embedding. ``on_epoch(epoch, mean_loss, val_f1)`` receives one record
    per finished epoch.
    """
    _check_labels(pairs)
    entries = [e for e in pairs.entries
               if len(graphs[(e[0].sequence, e[0].frame)]) and len(graphs[(e[1].sequence, e[1].frame)])]
    if len(entries) < len(pairs.entries):
        logger.warning("skipping %d pairs that involve empty graphs", len(pairs.entries) - len(entries))
    if not entries or len({e[2] for e in entries}) < 2:
        raise DegenerateDatasetError("after dropping empty graphs the pair set is single-class")
    labels = np.array([e[2] for e in entries], dtype=np.float64)
    val = _val_subset(val_pairs, cfg.val_max_pairs, cfg.seed) if val_pairs is not None and len(val_pairs) else None

    if resume is not None:
        if resume.model_config != model_config:
            raise ContractError("resume checkpoint was trained with a different model config")
        params = ModelParams.from_arrays(resume.params, model_config)
        opt = Adam(params.tensors, state=_copy_state(resume.optimizer))
        start = resume.epoch
        best = {k: v.copy() for k, v in resume.best_params.items()}
        best_f1, best_epoch, history = resume.best_val_f1, resume.best_epoch, list(resume.history)
    else:
        params = ModelParams.init(model_config)
        opt = Adam(params.tensors, lr=cfg.lr)
        start = 0
        best, best_f1, best_epoch, history = params.snapshot(), None, None, []
    opt.state.lr = cfg.lr

    ckpt = None
    for epoch in range(start, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(entries))
        losses = []
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            rng = np.random.default_rng([cfg.seed, epoch, bi])
            side_a, side_b = _batch_graphs([entries[i] for i in idx], graphs, cfg, rng)
            a, b = make_batch(side_a, model_config), make_batch(side_b, model_config)
            with Tape() as tape:
                loss = bce_loss(forward_pairs(a, b, params, model_config), labels[idx])
            tape.backward(loss, list(params))
            opt.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        val_f1 = None
        if val is not None:
            val_f1 = validation_f1(params, model_config, val, graphs, cfg.batch_size)
            if best_f1 is None or val_f1 > best_f1:
                best, best_f1, best_epoch = params.snapshot(), val_f1, epoch + 1
        else:
            best, best_epoch = params.snapshot(), epoch + 1
        history.append((epoch + 1, mean_loss, val_f1))
        logger.info("epoch %d loss %.6f val_f1max %s", epoch + 1, mean_loss, val_f1)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss, val_f1)
        ckpt = Checkpoint(params.snapshot(), {k: v.copy() for k, v in best.items()}, _copy_state(opt.state), epoch + 1,
                          model_config, cfg, best_f1, best_epoch, list(history))
        if cfg.checkpoint_path and ((epoch + 1) % cfg.checkpoint_interval == 0 or epoch + 1 == cfg.epochs):
            ckpt.save(cfg.checkpoint_path)
    if ckpt is None:
        # resumed at or past the final epoch
        ckpt = Checkpoint(params.snapshot(), best, _copy_state(opt.state), start, model_config, cfg, best_f1, best_epoch, history)
    return ckpt


def format_log_line(epoch: int, mean_loss: float, val_f1: float | None) -> str:
    v = "nan" if val_f1 is None or math.isnan(val_f1) else repr(float(val_f1))
    return f"{epoch},{mean_loss!r},{v}"
