"""Point Cloud Transformer classifier: point embedding, two sample-and-group
stages, four stacked offset-attention layers and an LBR head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import tensor as T
from ..errors import ConfigMismatch, InvalidCount, ShapeMismatch
from ..pointcloud import fps_indices_batch, knn_batch
from ..tensor import Tensor
from .layers import LBR, Linear, Module


@dataclass
class PCTConfig:
    input_points: int = 1024
    embed_dim: int = 64
    sg_points: list[int] = field(default_factory=lambda: [512, 256])
    sg_neighbors: int = 32
    sg_dims: list[int] = field(default_factory=lambda: [128, 256])
    attention_layers: int = 4
    attention_dim: int = 256
    fused_dim: int = 1024
    head_dims: list[int] = field(default_factory=lambda: [512, 256])
    num_classes: int = 6
    dropout: float = 0.5
    tiny: bool = False

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.sg_points, self.sg_points[1:])):
            raise ConfigMismatch(f"sg_points must be strictly decreasing, got {self.sg_points}")
        if self.sg_points[0] > self.input_points:
            raise ConfigMismatch("first sampling stage asks for more centers than input points")
        if self.attention_dim != self.sg_dims[-1]:
            raise ConfigMismatch("attention_dim must equal the last sample-and-group width")
        if self.attention_dim % 4:
            raise ConfigMismatch("attention_dim must be divisible by 4")
        if len(self.sg_points) != len(self.sg_dims):
            raise ConfigMismatch("sg_points and sg_dims differ in length")
        sources = [self.input_points] + self.sg_points[:-1]
        if any(self.sg_neighbors > m for m in sources):
            raise ConfigMismatch(f"sg_neighbors={self.sg_neighbors} exceeds a stage's point count")

    @classmethod
    def tiny_preset(cls, num_classes: int = 6, input_points: int = 128, sg_neighbors: int = 32) -> "PCTConfig":
        """Every width quartered; centers at 1/2 and 1/4 of the input points."""
        return cls(input_points=input_points, embed_dim=16,
                   sg_points=[input_points // 2, input_points // 4],
                   sg_neighbors=min(sg_neighbors, input_points // 2),
                   sg_dims=[32, 64], attention_dim=64, fused_dim=256, head_dims=[128, 64],
                   num_classes=num_classes, tiny=True)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"{k}={','.join(map(str, v)) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"


def _as_points(x, dtype=np.float32) -> tuple[Tensor, np.ndarray]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ShapeMismatch(f"point batch must be N x n x 3, got {t.shape}")
    return t, np.asarray(t.data, dtype=np.float64)


class PointEmbedding(Module):
    def __init__(self, rng, d: int):
        self.lbr1 = LBR(rng, 3, d)
        self.lbr2 = LBR(rng, d, d)

    def forward(self, pts: Tensor) -> Tensor:
        return self.lbr2(self.lbr1(pts))


class SampleGroup(Module):
    """FPS centers, k-nearest neighbor grouping, two LBRs, max-pool over neighbors."""

    def __init__(self, rng, d_in: int, d_out: int, n_centers: int, k: int):
        self.lbr1 = LBR(rng, 2 * d_in, d_out)
        self.lbr2 = LBR(rng, d_out, d_out)
        self.n_centers = n_centers
        self.k = k

    def forward(self, xyz: np.ndarray, feats: Tensor) -> tuple[np.ndarray, Tensor]:
        b, m, _ = xyz.shape
        if m < self.n_centers:
            raise InvalidCount(f"{m} points cannot yield {self.n_centers} centers")
        centers = fps_indices_batch(xyz, self.n_centers)
        new_xyz = np.take_along_axis(xyz, centers[..., None], axis=1)
        nbrs = knn_batch(xyz, new_xyz, self.k)
        # first LBR on concat(neighbor, neighbor - center), fused to skip the concat
        local = T.grouped_linear(feats, self.lbr1.linear.weight, nbrs, centers)
        out = self.lbr2(T.relu(self.lbr1.bn(local)))
        return new_xyz, T.max_over(out, dim=2)


class NeighborEmbedding(Module):
    def __init__(self, rng, config: PCTConfig):
        stages = []
        d_in = config.embed_dim
        for s, d in zip(config.sg_points, config.sg_dims):
            stages.append(SampleGroup(rng, d_in, d, s, config.sg_neighbors))
            d_in = d
        self.stages = stages

    def forward(self, xyz: np.ndarray, feats: Tensor) -> tuple[np.ndarray, Tensor]:
        for stage in self.stages:
            xyz, feats = stage(xyz, feats)
        return xyz, feats


class OffsetAttention(Module):
    def __init__(self, rng, d: int):
        self.q = Linear(rng, d, d // 4, bias=False)
        self.k = Linear(rng, d, d // 4, bias=False)
        self.v = Linear(rng, d, d)
        self.lbr = LBR(rng, d, d)
        self.last_weights: np.ndarray | None = None

    def attention_weights(self, f: Tensor) -> Tensor:
        """Row-stochastic weights: entry [j, i] is how much output j takes from value i.

        Softmax runs over the output positions for each source, then every
        output row is L1-normalized over its sources.
        """
        energy = T.matmul(self.q(f), T.transpose(self.k(f), (0, 2, 1)))   # [i, j] = q_i . k_j
        # L1-normalizing the rows of exp(log_softmax)^T is a softmax of the
        # transposed log-probabilities; the log domain keeps tiny columns exact
        log_s = T.transpose(T.log_softmax(energy, dim=-1), (0, 2, 1))      # [j, i]
        return T.softmax(log_s, dim=-1)

    def forward(self, f: Tensor) -> Tensor:
        if f.ndim != 3 or f.shape[-1] != self.v.weight.shape[0]:
            raise ShapeMismatch(f"offset attention expects N x n x {self.v.weight.shape[0]}, got {f.shape}")
        a = self.attention_weights(f)
        self.last_weights = a.data
        f_sa = T.matmul(a, self.v(f))
        return self.lbr(f - f_sa) + f


class PCTClassifier(Module):
    def __init__(self, config: PCTConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.embed = PointEmbedding(rng, config.embed_dim)
        self.neighbors = NeighborEmbedding(rng, config)
        d = config.attention_dim
        self.attention = [OffsetAttention(rng, d) for _ in range(config.attention_layers)]
        self.fuse = LBR(rng, config.attention_layers * d, config.fused_dim)
        heads = []
        d_in = 2 * config.fused_dim
        for h in config.head_dims:
            heads.append(LBR(rng, d_in, h))
            d_in = h
        self.head = heads
        self.classifier = Linear(rng, d_in, config.num_classes)
        self.dropout_rng = np.random.default_rng(seed + 1)

    def features(self, points) -> Tensor:
        """Per-center features after the attention stack, before pooling."""
        pts, xyz = _as_points(points, self.classifier.weight.dtype)
        if pts.shape[1] != self.config.input_points:
            raise ShapeMismatch(f"expected {self.config.input_points} points per cloud, got {pts.shape[1]}")
        f = self.embed(pts)
        _, f = self.neighbors(xyz, f)
        outs = []
        for layer in self.attention:
            f = layer(f)
            outs.append(f)
        return self.fuse(T.concat(outs, dim=-1))

    def forward(self, points) -> Tensor:
        fused = self.features(points)
        g = T.concat([T.max_over(fused, dim=1), T.mean_over(fused, dim=1)], dim=-1)
        for lbr in self.head:
            g = T.dropout(lbr(g), self.config.dropout, self.training, self.dropout_rng)
        return self.classifier(g)


def point_embed(model: PCTClassifier, points) -> Tensor:
    pts, _ = _as_points(points, model.classifier.weight.dtype)
    return model.embed(pts)


def neighbor_embed(model: PCTClassifier, points, features: Tensor) -> tuple[np.ndarray, Tensor]:
    _, xyz = _as_points(points)
    return model.neighbors(xyz, features)


def offset_attention(layer: OffsetAttention, f: Tensor) -> Tensor:
    return layer(f)


def pct_forward(model: PCTClassifier, clouds) -> Tensor:
    return model(clouds)
