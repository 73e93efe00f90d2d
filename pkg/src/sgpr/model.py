"""Graph similarity network over fixed-capacity semantic graphs.

Pipeline per pair: two-branch dynamic EdgeConv node embedding (centroid
branch and one-hot class branch), attention pooling to a graph vector,
a neural tensor network relating the two graph vectors, and a small fully
connected head ending in a sigmoid score.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor
from .errors import CapacityError, ContractError, ShapeError
from .graph import NUM_CLASSES, SemanticGraph

SCORE_EPS = 1e-7
# NTN and hidden FC units start slightly active; graph vectors are all
# non-negative, so a unit that starts dead for one pair is dead for all
RELU_BIAS_INIT = 0.1


@dataclass(frozen=True)
class ModelConfig:
    capacity: int = 100
    knn_k: int = 10
    num_classes: int = NUM_CLASSES
    spatial_widths: tuple[int, ...] = (32, 64)
    semantic_widths: tuple[int, ...] = (32, 64)
    ntn_slices: int = 16
    fc_widths: tuple[int, ...] = (8,)
    seed: int = 0
    # fixed input/embedding multipliers; both are absorbed exactly by the
    # next linear map, so they only change how Adam steps are scaled
    coord_scale: float = 0.05
    embed_scale: float = 0.1

    def __post_init__(self):
        if self.knn_k < 1 or self.ntn_slices < 1 or self.capacity < 1:
            raise ContractError("capacity, knn_k and ntn_slices must all be at least 1")
        if not self.spatial_widths or not self.semantic_widths:
            raise ContractError("each branch needs at least one EdgeConv layer")
        if not (self.coord_scale > 0 and self.embed_scale > 0):
            raise ContractError("coord_scale and embed_scale must be positive")

    @property
    def embed_dim(self) -> int:
        return self.spatial_widths[-1] + self.semantic_widths[-1]

    @property
    def feature_dim(self) -> int:
        return 3 + self.num_classes

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
        return cls(**kw)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ModelParams:
    """Named learnable tensors.

    EdgeConv layer ``l`` of branch ``b`` holds ``b.l.self`` (acting on
    ``f_i``), ``b.l.diff`` (acting on ``f_i - f_j``) and ``b.l.bias``;
    stacked, the first two form the layer's ``2F x O`` weight.
    """

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    @classmethod
    def init(cls, config: ModelConfig) -> "ModelParams":
        rng = np.random.default_rng(config.seed)
        t: dict[str, np.ndarray] = {}
        for branch, fin, widths in (("spatial", 3, config.spatial_widths),
                                    ("semantic", config.num_classes, config.semantic_widths)):
            for layer, fout in enumerate(widths):
                theta = _glorot(rng, (2 * fin, fout), 2 * fin, fout)
                t[f"{branch}.{layer}.self"] = theta[:fin]
                t[f"{branch}.{layer}.diff"] = theta[fin:]
                t[f"{branch}.{layer}.bias"] = np.zeros(fout)
                fin = fout
        D, S = config.embed_dim, config.ntn_slices
        t["att.W"] = _glorot(rng, (D, D), D, D)
        t["ntn.omega"] = _glorot(rng, (D, D, S), D * D, S)
        t["ntn.alpha"] = _glorot(rng, (S, 2 * D), 2 * D, S)
        t["ntn.bias"] = np.full(S, RELU_BIAS_INIT)
        fin = S
        widths = tuple(config.fc_widths) + (1,)
        for layer, fout in enumerate(widths):
            t[f"fc.{layer}.weight"] = _glorot(rng, (fin, fout), fin, fout)
            t[f"fc.{layer}.bias"] = np.full(fout, RELU_BIAS_INIT if layer < len(widths) - 1 else 0.0)
            fin = fout
        return cls({k: Tensor(v, requires_grad=True) for k, v in t.items()})

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], config: ModelConfig) -> "ModelParams":
        expected = cls.init(config)
        for k, v in expected.items():
            if k not in arrays:
                raise ShapeError(f"checkpoint lacks parameter {k!r}")
            if arrays[k].shape != v.shape:
                raise ShapeError(f"parameter {k!r}: checkpoint shape {arrays[k].shape}, config wants {v.shape}")
        return cls({k: Tensor(arrays[k].copy(), requires_grad=True) for k in expected.tensors})


@dataclass
class GraphBatch:
    """``features``: ``(B, N, 3 + C)`` (centroid then one-hot); ``mask``: ``(B, N)``."""

    features: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.features)

    def trimmed(self) -> "GraphBatch":
        """Drop trailing columns that are padding in every graph."""
        used = np.flatnonzero(self.mask.any(axis=0))
        n = int(used[-1]) + 1 if len(used) else 1
        return GraphBatch(self.features[:, :n], self.mask[:, :n])


def encode_nodes(graph: SemanticGraph, config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """One padded row block: ``(capacity, 3 + C)`` features and ``(capacity,)`` mask."""
    n = len(graph)
    if n > config.capacity:
        raise CapacityError(f"graph has {n} nodes, capacity is {config.capacity}")
    feats = np.zeros((config.capacity, config.feature_dim))
    mask = np.zeros(config.capacity, dtype=bool)
    if n:
        classes = graph.classes
        if classes.min() < 0 or classes.max() >= config.num_classes:
            raise ShapeError(f"node classes must lie in [0, {config.num_classes})")
        feats[:n, :3] = graph.centroids
        feats[np.arange(n), 3 + classes] = 1.0
        mask[:n] = True
    return feats, mask


def make_batch(graphs: list[SemanticGraph], config: ModelConfig) -> GraphBatch:
    rows = [encode_nodes(g, config) for g in graphs]
    if not rows:
        return GraphBatch(np.zeros((0, config.capacity, config.feature_dim)),
                          np.zeros((0, config.capacity), dtype=bool))
    return GraphBatch(np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows]))


def _sq_distances(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("...nf,...nf->...n", x, x)
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * np.matmul(x, np.swapaxes(x, -1, -2))
    return np.maximum(d, 0.0, out=d)


def knn_indices(features: np.ndarray, mask: np.ndarray, k: int,
                tiebreak: np.ndarray | None = None) -> np.ndarray:
    """k nearest real neighbours of each node, excluding the node itself.

    Works on one graph ``(N, F)`` or a batch ``(B, N, F)``. Candidates are
    ranked by squared Euclidean distance in feature space, then by
    ``tiebreak`` (an ``(..., N, N)`` secondary distance) when given, then by
    index. Missing neighbours are filled with the node's own index, and
    padding nodes point only at themselves.
    """
    if k < 1:
        raise ContractError(f"knn_indices: k must be at least 1, got {k}")
    single = features.ndim == 2
    x = np.asarray(features, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if single:
        x, m = x[None], m[None]
        tiebreak = None if tiebreak is None else np.asarray(tiebreak)[None]
    B, N, _ = x.shape
    cols = np.broadcast_to(np.arange(N, dtype=np.float64), (B, N, N))
    tb = cols if tiebreak is None else tiebreak
    d = _sq_distances(x)
    invalid = ~(m[:, :, None] & m[:, None, :])
    invalid |= np.eye(N, dtype=bool)[None]
    np.putmask(d, invalid, np.inf)
    take = min(k, N)
    order = _smallest(d, tb, cols, take)
    idx = np.empty((B, N, k), dtype=np.int64)
    idx[:, :, :take] = order
    valid = np.zeros((B, N, k), dtype=bool)
    valid[:, :, :take] = ~np.take_along_axis(invalid, order, axis=-1)
    self_idx = np.broadcast_to(np.arange(N)[None, :, None], (B, N, k))
    idx = np.where(valid, idx, self_idx)
    return idx[0] if single else idx


def _smallest(d: np.ndarray, tb: np.ndarray, cols: np.ndarray, take: int) -> np.ndarray:
    """First ``take`` columns per row in (d, tb, column) lexicographic order."""
    N = d.shape[-1]
    if take >= N:
        return np.lexsort((cols, tb, d), axis=-1)[..., :take]
    part = np.argpartition(d, take - 1, axis=-1)[..., :take]
    kth = np.take_along_axis(d, part, axis=-1).max(axis=-1)
    # rows short of real candidates get padded later, so their order is moot
    tied = np.isfinite(kth) & ((d <= kth[..., None]).sum(axis=-1) > take)
    if tied.any():
        dt, tbt, ct, kt = d[tied], tb[tied], cols[tied], kth[tied][:, None]
        # strictly closer candidates are always in; tb splits the boundary
        key = np.where(dt < kt, -np.inf, np.where(dt == kt, tbt, np.inf))
        sub = np.argpartition(key, take - 1, axis=-1)[:, :take]
        edge = np.take_along_axis(key, sub, axis=-1).max(axis=-1)
        still = (key <= edge[:, None]).sum(axis=-1) > take
        if still.any():
            sub[still] = np.lexsort((ct[still], tbt[still], dt[still]), axis=-1)[:, :take]
        part[tied] = sub
    sub_order = np.lexsort((part, np.take_along_axis(tb, part, axis=-1),
                            np.take_along_axis(d, part, axis=-1)), axis=-1)
    return np.take_along_axis(part, sub_order, axis=-1)


def edge_conv(features, neighbors: np.ndarray, theta_self, theta_diff, bias, mask) -> Tensor:
    """One EdgeConv layer with max aggregation.

    For node ``i`` with neighbours ``j``, each edge computes
    ``ReLU([f_i, f_i - f_j] @ [theta_self; theta_diff] + bias)`` and the
    node keeps the elementwise max over its edges. Evaluated as
    ``ReLU(f_i (theta_self + theta_diff) + bias - min_j f_j theta_diff)``,
    which is the same function with the gather done after projection.
    Padding rows come out as zero.
    """
    f = as_tensor(features)
    theta_self, theta_diff, bias = as_tensor(theta_self), as_tensor(theta_diff), as_tensor(bias)
    if f.ndim != 3 or f.shape[-1] != theta_self.shape[0] or theta_self.shape != theta_diff.shape:
        raise ShapeError(
            f"edge_conv: features {f.shape} vs weights {theta_self.shape}/{theta_diff.shape}"
        )
    if neighbors.shape[:2] != f.shape[:2]:
        raise ShapeError(f"edge_conv: neighbours {neighbors.shape} vs features {f.shape}")
    centre = ops.matmul(f, ops.add(theta_self, theta_diff))
    proj = ops.neg(ops.matmul(f, theta_diff))
    nearest = ops.gather_max(proj, neighbors)
    out = ops.relu(ops.add(ops.add(centre, nearest), bias))
    return ops.mul(out, np.asarray(mask, dtype=np.float64)[..., None])


def _branch(x: Tensor, mask: np.ndarray, params: ModelParams, name: str, depth: int,
            k: int, tiebreak: np.ndarray) -> Tensor:
    for layer in range(depth):
        nbrs = knn_indices(x.data, mask, k, tiebreak)
        x = edge_conv(x, nbrs, params[f"{name}.{layer}.self"], params[f"{name}.{layer}.diff"],
                      params[f"{name}.{layer}.bias"], mask)
    return x


def node_embedding(batch: GraphBatch, params: ModelParams, config: ModelConfig,
                   features: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
    """Per-node embeddings ``U`` of shape ``(B, N, D)`` plus the mask.

    Each branch recomputes kNN in its current feature space before every
    layer; centroid distance breaks ties (needed for the one-hot branch,
    where many candidates are equidistant). Centroids enter the spatial
    branch multiplied by ``config.coord_scale``. ``features`` may pass the batch
    features as a tensor to differentiate with respect to them.
    """
    x = as_tensor(batch.features) if features is None else features
    mask = batch.mask
    if x.shape[-1] != config.feature_dim:
        raise ShapeError(f"batch features {x.shape} do not match feature dim {config.feature_dim}")
    if len(mask) and not mask.any(axis=1).all():
        raise ContractError("every graph in a batch needs at least one real node")
    xyz = ops.mul(x[:, :, :3], config.coord_scale)
    onehot = x[:, :, 3:]
    tiebreak = _sq_distances(batch.features[:, :, :3])
    spatial = _branch(xyz, mask, params, "spatial", len(config.spatial_widths), config.knn_k, tiebreak)
    semantic = _branch(onehot, mask, params, "semantic", len(config.semantic_widths), config.knn_k, tiebreak)
    return ops.concat([spatial, semantic], axis=-1), mask


def graph_embedding(U, mask: np.ndarray, W) -> tuple[Tensor, Tensor]:
    """Attention pooling; returns ``(e, attention)``.

    ``c = tanh(mean_real(U) W)``, ``a_i = u_i · c`` and
    ``e = Σ_real sigmoid(a_i) u_i``. The mean divides by the number of
    real nodes, so padding never changes the result.
    """
    U = as_tensor(U)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ContractError("graph_embedding: a graph has no real nodes")
    context = ops.tanh(ops.matmul(ops.masked_mean(U, mask, axis=1), W))
    B, N, D = U.shape
    scores = ops.sum(ops.mul(U, ops.reshape(context, (B, 1, D))), axis=2)
    attention = ops.mul(ops.sigmoid(scores), mask.astype(np.float64))
    e = ops.sum(ops.mul(U, ops.reshape(attention, (B, N, 1))), axis=1)
    return e, attention


def ntn_interact(e1, e2, omega, alpha, bias) -> Tensor:
    """``ReLU(e1ᵀ ω_s e2 + α_s·[e1, e2] + b_s)`` for every slice ``s``."""
    e1, e2, alpha = as_tensor(e1), as_tensor(e2), as_tensor(alpha)
    if e1.shape != e2.shape or e1.ndim != 2:
        raise ShapeError(f"ntn_interact: embeddings {e1.shape} and {e2.shape} must match (B, D)")
    if alpha.shape != (as_tensor(omega).shape[-1], 2 * e1.shape[1]):
        raise ShapeError(f"ntn_interact: alpha {alpha.shape} vs embeddings {e1.shape}")
    bil = ops.bilinear_form(e1, omega, e2)
    lin = ops.matmul(ops.concat([e1, e2], axis=-1), ops.transpose(alpha))
    return ops.relu(ops.add(ops.add(bil, lin), bias))


def fc_layers(config: ModelConfig) -> int:
    return len(config.fc_widths) + 1


def similarity_head(g, params: ModelParams, n_layers: int) -> Tensor:
    """Fully connected stack, ReLU between layers, sigmoid on the single output."""
    h = as_tensor(g)
    for layer in range(n_layers):
        h = ops.add(ops.matmul(h, params[f"fc.{layer}.weight"]), params[f"fc.{layer}.bias"])
        if layer < n_layers - 1:
            h = ops.relu(h)
    return ops.reshape(ops.sigmoid(h), (h.shape[0],))


def _concat_batches(a: GraphBatch, b: GraphBatch) -> GraphBatch:
    n = max(a.features.shape[1], b.features.shape[1])

    def pad(x, fill):
        extra = n - x.shape[1]
        if not extra:
            return x
        widths = [(0, 0), (0, extra)] + [(0, 0)] * (x.ndim - 2)
        return np.pad(x, widths, constant_values=fill)

    return GraphBatch(np.concatenate([pad(a.features, 0.0), pad(b.features, 0.0)]),
                      np.concatenate([pad(a.mask, False), pad(b.mask, False)]))


def forward_pairs(batch_a: GraphBatch, batch_b: GraphBatch, params: ModelParams,
                  config: ModelConfig, return_attention: bool = False):
    """Similarity score in (0, 1) for every pair ``(batch_a[i], batch_b[i])``.

    Both sides go through the node embedding in one pass. Columns that are
    padding in every graph are trimmed first, which is exact because
    padding never reaches real nodes. Graph vectors are multiplied by
    ``config.embed_scale`` on their way into the NTN.
    """
    if len(batch_a) != len(batch_b):
        raise ShapeError(f"forward_pairs: batch sizes {len(batch_a)} and {len(batch_b)} differ")
    B = len(batch_a)
    joint = _concat_batches(batch_a.trimmed(), batch_b.trimmed())
    U, mask = node_embedding(joint, params, config)
    e, attention = graph_embedding(U, mask, params["att.W"])
    e = ops.mul(e, config.embed_scale)
    e1, e2 = e[:B], e[B:]
    g = ntn_interact(e1, e2, params["ntn.omega"], params["ntn.alpha"], params["ntn.bias"])
    scores = similarity_head(g, params, fc_layers(config))
    if return_attention:
        return scores, attention.data[:B], attention.data[B:]
    return scores


def bce_loss(scores, labels) -> Tensor:
    """Mean binary cross-entropy with scores clamped to ``[1e-7, 1 - 1e-7]``."""
    s = ops.clip(scores, SCORE_EPS, 1.0 - SCORE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != s.shape:
        raise ShapeError(f"bce_loss: scores {s.shape} vs labels {y.shape}")
    ll = ops.add(ops.mul(ops.log(s), y), ops.mul(ops.log(ops.sub(1.0, s)), 1.0 - y))
    return ops.neg(ops.mean(ll))


def score_graph_pairs(pairs: list[tuple[SemanticGraph, SemanticGraph]], params: ModelParams,
                      config: ModelConfig, batch_size: int = 128) -> np.ndarray:
    """Inference helper: scores for a list of graph pairs, in order."""
    out = np.zeros(len(pairs))
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        a = make_batch([p[0] for p in chunk], config)
        b = make_batch([p[1] for p in chunk], config)
        out[start:start + len(chunk)] = forward_pairs(a, b, params, config).data
    return out
