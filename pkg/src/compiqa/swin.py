"""Hierarchical shifted-window attention backbone and its fused feature pyramid.

The backbone is the standard four-stage Swin layout: non-overlapping patch
embedding, window attention blocks with alternating shifts, patch merging
between stages. Three feature maps are read out at 1/8, 1/16 and 1/32 of the
input resolution, a fourth is the layer-normed copy of the last one, and
``fuse_pyramid`` upsamples everything to the 1/8 grid and concatenates along
channels, giving 2C+4C+8C+8C = 22C channels.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, load_into_module
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 96
    stage_depths: tuple = (2, 2, 6, 2)
    window_size: int = 7
    patch_size: int = 4
    heads_per_stage: tuple = (3, 6, 12, 24)
    pretrained_weights: str | None = None

    def __post_init__(self):
        if len(self.stage_depths) != 4 or len(self.heads_per_stage) != 4:
            raise ConfigError("stage_depths and heads_per_stage must have 4 entries")
        if self.embed_dim < 1 or self.window_size < 1 or self.patch_size < 1:
            raise ConfigError("embed_dim, window_size and patch_size must be positive")
        if any(d < 1 for d in self.stage_depths):
            raise ConfigError("every stage needs at least one block")
        for i, heads in enumerate(self.heads_per_stage):
            if heads < 1 or self.stage_dims[i] % heads != 0:
                raise ConfigError(
                    f"stage {i} dim {self.stage_dims[i]} not divisible by {heads} heads"
                )

    @property
    def stage_dims(self):
        return tuple(self.embed_dim * 2 ** i for i in range(4))

    @property
    def fused_channels(self):
        return 22 * self.embed_dim

    @property
    def input_multiple(self):
        """Input H and W must be divisible by this (three 2x downsamples)."""
        return self.patch_size * 8

    def to_dict(self):
        return {
            "embed_dim": self.embed_dim,
            "stage_depths": list(self.stage_depths),
            "window_size": self.window_size,
            "patch_size": self.patch_size,
            "heads_per_stage": list(self.heads_per_stage),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            embed_dim=int(d["embed_dim"]),
            stage_depths=tuple(d["stage_depths"]),
            window_size=int(d["window_size"]),
            patch_size=int(d["patch_size"]),
            heads_per_stage=tuple(d["heads_per_stage"]),
        )


def seeded_init_(module: nn.Module, seed: int) -> None:
    """Deterministic init: one generator consumed in parameter order.

    Biases zero, 1-D weights (layer-norm scales) one, everything else
    truncated normal with std 0.02.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith(".bias") or name == "bias":
                p.zero_()
            elif p.ndim == 1:
                p.fill_(1.0)
            else:
                nn.init.trunc_normal_(p, std=0.02, generator=gen)


def tiny_test_config() -> BackboneConfig:
    """Small config that runs every shape path in seconds on a 64x64 input."""
    return BackboneConfig(
        embed_dim=8, stage_depths=(1, 1, 1, 1), window_size=4,
        patch_size=4, heads_per_stage=(1, 2, 4, 8),
    )


def _window_partition(x, window):
    # (B, H, W, C) -> (B * nWindows, window*window, C)
    b, h, w, c = x.shape
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def _window_reverse(windows, window, h, w):
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.view(b, h // window, w // window, window, window, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


def _attention_mask(h_pad, w_pad, h, w, window, shift, device):
    """Pairwise additive mask (-100 blocks attention) for one padded canvas.

    Cells get a region id; tokens in different regions must not attend to
    each other. Shift regions follow the usual cyclic-roll slicing; padded
    rows/columns get their own id so pad tokens never leak into real ones.
    """
    if shift == 0 and h_pad == h and w_pad == w:
        return None
    canvas = torch.zeros((1, h_pad, w_pad, 1), device=device)
    if shift > 0:
        cnt = 0
        spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
        for hs in spans:
            for ws in spans:
                canvas[:, hs, ws, :] = cnt
                cnt += 1
    if h_pad > h or w_pad > w:
        pad = torch.zeros((1, h_pad, w_pad, 1), device=device)
        pad[:, h:, :, :] = 1.0
        pad[:, :, w:, :] = 1.0
        if shift > 0:
            # mask coordinates live on the rolled canvas
            pad = torch.roll(pad, shifts=(-shift, -shift), dims=(1, 2))
        canvas = canvas + 100.0 * pad
    ids = _window_partition(canvas, window).squeeze(-1)
    diff = ids.unsqueeze(1) - ids.unsqueeze(2)
    return torch.where(diff == 0, 0.0, -100.0)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside one window, with relative position bias."""

    def __init__(self, dim, heads, window):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.window = window
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, heads)
        )
        coords = torch.stack(
            torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
        ).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
        rel = rel + (window - 1)
        index = rel[:, :, 0] * (2 * window - 1) + rel[:, :, 1]
        self.register_buffer("relative_position_index", index, persistent=False)

    def forward(self, x, mask=None):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        bias = bias.view(n, n, self.heads).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b // nw, nw, self.heads, n, n) + mask[:, None]
            attn = attn.view(b, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim, heads, window, shift):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def _attend(self, x, hw):
        h, w = hw
        b, _, c = x.shape
        x = x.view(b, h, w, c)
        pad_b = (self.window - h % self.window) % self.window
        pad_r = (self.window - w % self.window) % self.window
        if pad_b or pad_r:
            x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
        h_pad, w_pad = x.shape[1], x.shape[2]
        # a single window covers everything, shifting would be a no-op
        shift = self.shift if min(h_pad, w_pad) > self.window else 0
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        mask = _attention_mask(h_pad, w_pad, h, w, self.window, shift, x.device)
        windows = _window_partition(x, self.window)
        windows = self.attn(windows, mask)
        x = _window_reverse(windows, self.window, h_pad, w_pad)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        if pad_b or pad_r:
            x = x[:, :h, :w, :]
        return x.reshape(b, h * w, c)

    def forward(self, x, hw):
        x = x + self._attend(self.norm1(x), hw)
        x = x + self.mlp(self.norm2(x))
        return x


class PatchMerging(nn.Module):
    """2x2 neighborhood concat + linear reduction: (H, W, C) -> (H/2, W/2, 2C)."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x, hw):
        h, w = hw
        b, _, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even feature dims, got {h}x{w}")
        x = x.view(b, h, w, c)
        x = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]],
            dim=-1,
        )
        x = x.view(b, (h // 2) * (w // 2), 4 * c)
        return self.reduction(self.norm(x)), (h // 2, w // 2)


class PatchEmbed(nn.Module):
    def __init__(self, dim, patch):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.proj(x)
        b, c, h, w = x.shape
        return self.norm(x.flatten(2).transpose(1, 2)), (h, w)


class SwinBackbone(nn.Module):
    """Four-stage backbone exposing the 1/8, 1/16, 1/32, 1/32 feature maps."""

    def __init__(self, config: BackboneConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or BackboneConfig()
        cfg = self.config
        self.patch_embed = PatchEmbed(cfg.embed_dim, cfg.patch_size)
        self.stages = nn.ModuleList()
        for i, depth in enumerate(cfg.stage_depths):
            blocks = nn.ModuleList(
                SwinBlock(
                    cfg.stage_dims[i], cfg.heads_per_stage[i], cfg.window_size,
                    shift=0 if j % 2 == 0 else cfg.window_size // 2,
                )
                for j in range(depth)
            )
            self.stages.append(blocks)
        self.merges = nn.ModuleList(PatchMerging(cfg.stage_dims[i]) for i in range(3))
        self.norm = nn.LayerNorm(cfg.stage_dims[3])
        self.reset_parameters(seed)
        if cfg.pretrained_weights is not None:
            state, _ = load_checkpoint(cfg.pretrained_weights)
            load_into_module(self, state, prefix="backbone.")

    def reset_parameters(self, seed: int) -> None:
        seeded_init_(self, seed)

    def forward(self, x: torch.Tensor):
        """(B, 3, H, W) normalized input -> 4 channel-first stage maps."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        mult = self.config.input_multiple
        if x.shape[2] % mult or x.shape[3] % mult:
            raise ShapeError(
                f"input {x.shape[2]}x{x.shape[3]} not divisible by {mult}; pad first"
            )
        tokens, hw = self.patch_embed(x)
        maps = []
        for i in range(4):
            for block in self.stages[i]:
                tokens = block(tokens, hw)
            if i >= 1:
                maps.append(_tokens_to_map(tokens, hw))
            if i < 3:
                tokens, hw = self.merges[i](tokens, hw)
        # fourth readout: layer-normed copy of the last stage, same resolution
        maps.append(_tokens_to_map(self.norm(tokens), hw))
        return tuple(maps)


def _tokens_to_map(tokens, hw):
    b, _, c = tokens.shape
    return tokens.view(b, hw[0], hw[1], c).permute(0, 3, 1, 2)


def build_backbone(config: BackboneConfig | None = None, seed: int = 0) -> SwinBackbone:
    return SwinBackbone(config, seed=seed)


@dataclass
class StageFeatures:
    """Single-image stage features, channel-last float32 arrays."""
    f1: np.ndarray  # (H/8,  W/8,  2C)
    f2: np.ndarray  # (H/16, W/16, 4C)
    f3: np.ndarray  # (H/32, W/32, 8C)
    f4: np.ndarray  # (H/32, W/32, 8C)


def extract_stage_features(backbone: SwinBackbone, img: np.ndarray) -> StageFeatures:
    """Run one normalized (H, W, 3) image through the backbone, no grad."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {img.shape}")
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    x = x.permute(2, 0, 1).unsqueeze(0)
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            maps = backbone(x)
    finally:
        backbone.train(was_training)
    f1, f2, f3, f4 = (m[0].permute(1, 2, 0).numpy() for m in maps)
    return StageFeatures(f1, f2, f3, f4)


def bilinear_upsample(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize, half-pixel-centers convention, exact on constants.

    Written as a + lambda * (b - a) so a constant input stays bitwise
    constant, which the stock kernel does not guarantee.
    """
    _, _, h, w = x.shape
    out_h, out_w = size

    def axis(n_in, n_out):
        i = torch.arange(n_out, dtype=x.dtype, device=x.device)
        s = ((i + 0.5) * (n_in / n_out) - 0.5).clamp(min=0.0)
        lo = s.floor().long().clamp(max=n_in - 1)
        hi = (lo + 1).clamp(max=n_in - 1)
        return lo, hi, s - lo.to(x.dtype)

    r0, r1, lr = axis(h, out_h)
    c0, c1, lc = axis(w, out_w)
    top = x[:, :, r0]
    bot = x[:, :, r1]
    left = top[:, :, :, c0] + lr[:, None] * (bot[:, :, :, c0] - top[:, :, :, c0])
    right = top[:, :, :, c1] + lr[:, None] * (bot[:, :, :, c1] - top[:, :, :, c1])
    return left + lc * (right - left)


def fuse_pyramid_maps(maps) -> torch.Tensor:
    """Concatenate stage maps on the 1/8 grid: (B, 22C, H/8, W/8)."""
    f1, f2, f3, f4 = maps
    c1 = f1.shape[1]
    expected = (2 * c1, 4 * c1, 4 * c1)
    got = (f2.shape[1], f3.shape[1], f4.shape[1])
    if got != expected:
        raise ShapeError(f"stage channels {(c1,) + got} break the 2C/4C/8C/8C ladder")
    h1, w1 = f1.shape[-2:]
    if (
        f2.shape[-2:] != (h1 // 2, w1 // 2)
        or f3.shape[-2:] != (h1 // 4, w1 // 4)
        or f4.shape[-2:] != f3.shape[-2:]
    ):
        raise ShapeError(
            "stage resolutions do not form the 1/8, 1/16, 1/32, 1/32 ladder: "
            f"{[tuple(m.shape[-2:]) for m in maps]}"
        )
    target = f1.shape[-2:]
    parts = [f1] + [bilinear_upsample(m, target) for m in (f2, f3, f4)]
    return torch.cat(parts, dim=1)


def fuse_pyramid(sf: StageFeatures) -> np.ndarray:
    """Fused (H/8, W/8, 22C) array for one image's stage features."""
    maps = []
    for f in (sf.f1, sf.f2, sf.f3, sf.f4):
        f = np.asarray(f)
        if f.ndim != 3:
            raise ShapeError(f"stage feature must be (H, W, C), got {f.shape}")
        t = torch.from_numpy(np.ascontiguousarray(f, dtype=np.float32))
        maps.append(t.permute(2, 0, 1).unsqueeze(0))
    fused = fuse_pyramid_maps(maps)
    return fused[0].permute(1, 2, 0).numpy()
