"""Learned distance space over fused backbone features.

Takes the reference and distorted 22C-channel pyramids, maps the pair into
a token sequence by one of four strategies, and regresses a scalar distance
in (0, 1). The attention block is a single two-step unit: self-attention
over the distorted tokens (no residual), then attention with the reference
tokens as queries over that result (with residual), then an MLP (with
residual), each step followed by its own layer norm. Attention is plain
scaled dot-product with head splitting; the q/k/v maps are bias-free
matrices and there is no output projection and no positional encoding.
"""

from enum import IntEnum

import torch
import torch.nn.functional as F
from torch import nn

from .dpis import texture_structure_similarity
from .errors import ConfigError, NumericError, ShapeError
from .swin import seeded_init_


class MappingMode(IntEnum):
    CROSS_ATTN = 1       # cross_attention(ref, dist)
    DIFF_CROSS_ATTN = 2  # cross_attention(ref, dist - ref)
    DIFF = 3             # tokens of (dist - ref), no attention
    DISTS_SIM = 4        # per-channel texture/structure similarity vector


def _mhsa(q, k, v, heads, block):
    """Scaled dot-product attention with head split/merge, nothing else."""
    b, n, d = q.shape
    dh = d // heads

    def split(t):
        return t.view(b, n, heads, dh).transpose(1, 2)

    logits = split(q) @ split(k).transpose(-2, -1) * dh ** -0.5
    if not torch.isfinite(logits).all():
        raise NumericError(f"non-finite attention logits in the {block} block")
    attn = logits.softmax(dim=-1)
    return (attn @ split(v)).transpose(1, 2).reshape(b, n, d)


class RegressionHead(nn.Module):
    """Mean-pool tokens, then in_dim -> in_dim/2 -> 1 with a final sigmoid."""

    def __init__(self, in_dim):
        super().__init__()
        if in_dim < 2:
            raise ConfigError(f"regression head needs in_dim >= 2, got {in_dim}")
        self.fc1 = nn.Linear(in_dim, in_dim // 2)
        self.fc2 = nn.Linear(in_dim // 2, 1)

    def forward(self, x):
        if x.ndim == 3:
            x = x.mean(dim=1)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(x)))).squeeze(-1)


class DistanceHead(nn.Module):
    """Distance-space mapping plus regression for one fixed mapping mode.

    Only the parameters the mode actually uses are created, so checkpoints
    stay honest about what was trained.
    """

    def __init__(self, in_channels, mode=MappingMode.CROSS_ATTN, dim=256,
                 heads=4, seed=0):
        super().__init__()
        self.mode = MappingMode(mode)
        self.in_channels = in_channels
        self.dim = dim
        self.heads = heads
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        if self.mode != MappingMode.DISTS_SIM:
            self.proj_in = nn.Linear(in_channels, dim, bias=False)
        if self.mode in (MappingMode.CROSS_ATTN, MappingMode.DIFF_CROSS_ATTN):
            self.self_q = nn.Linear(dim, dim, bias=False)
            self.self_k = nn.Linear(dim, dim, bias=False)
            self.self_v = nn.Linear(dim, dim, bias=False)
            self.cross_q = nn.Linear(dim, dim, bias=False)
            self.cross_k = nn.Linear(dim, dim, bias=False)
            self.cross_v = nn.Linear(dim, dim, bias=False)
            self.norm1 = nn.LayerNorm(dim)
            self.norm2 = nn.LayerNorm(dim)
            self.norm3 = nn.LayerNorm(dim)
            self.mlp = nn.Sequential(
                nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
            )
        head_in = in_channels if self.mode == MappingMode.DISTS_SIM else dim
        self.regressor = RegressionHead(head_in)
        seeded_init_(self, seed)

    def config_dict(self):
        return {"mode": int(self.mode), "dim": self.dim, "heads": self.heads,
                "in_channels": self.in_channels}

    def tokens(self, fused):
        """Row-major spatial flattening of (B, C, H, W), projected to dim."""
        if fused.ndim != 4 or fused.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (B, {self.in_channels}, H, W) feature, got {tuple(fused.shape)}"
            )
        b, c, h, w = fused.shape
        seq = fused.permute(0, 2, 3, 1).reshape(b, h * w, c)
        return self.proj_in(seq)

    def cross_attention(self, ref_tokens, dist_tokens):
        if ref_tokens.shape != dist_tokens.shape:
            raise ShapeError(
                f"token shapes differ: {tuple(ref_tokens.shape)} vs {tuple(dist_tokens.shape)}"
            )
        z = _mhsa(
            self.self_q(dist_tokens), self.self_k(dist_tokens),
            self.self_v(dist_tokens), self.heads, "self-attention",
        )
        z = self.norm1(z)
        z2 = _mhsa(
            self.cross_q(ref_tokens), self.cross_k(z), self.cross_v(z),
            self.heads, "cross-attention",
        ) + z
        z2 = self.norm2(z2)
        return self.norm3(self.mlp(z2) + z2)

    def map_distance(self, f_ref, f_dist):
        if f_ref.shape != f_dist.shape:
            raise ShapeError(
                f"feature shapes differ: {tuple(f_ref.shape)} vs {tuple(f_dist.shape)}"
            )
        if self.mode == MappingMode.CROSS_ATTN:
            return self.cross_attention(self.tokens(f_ref), self.tokens(f_dist))
        if self.mode == MappingMode.DIFF_CROSS_ATTN:
            return self.cross_attention(self.tokens(f_ref), self.tokens(f_dist - f_ref))
        if self.mode == MappingMode.DIFF:
            return self.tokens(f_dist - f_ref)
        l, s = texture_structure_similarity(f_ref, f_dist)
        return (l + s) / 2

    def forward(self, f_ref, f_dist):
        """Distance in (0, 1) per batch element."""
        return self.regressor(self.map_distance(f_ref, f_dist))
