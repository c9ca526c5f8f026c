"""Dual-branch perceptual distance on images and their gradient maps.

Branch one runs both inputs (and their edge-magnitude maps) through six
VGG-16 stages and scores weighted texture/structure similarity per channel;
branch two runs them through five AlexNet stages and accumulates scaled
squared differences of unit-normalized channel vectors. Each branch fuses
its image and gradient scores with a tiny affine layer, and a scalar gamma
blends the two branch distances convexly.

The convolutional extractors are frozen; the learned state is the channel
weights (alpha, beta, psi), the two fusion layers, and gamma, kept under
the "dpis." checkpoint prefix with the extractors under "vgg." and
"alexnet.". Stub extractors with the same stage topology but tiny widths
exist so property tests run in milliseconds.
"""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import images
from .checkpoint import load_checkpoint, load_into_module, module_state, save_checkpoint
from .errors import CheckpointError, ConfigError, ParameterError, ShapeError
from .swin import seeded_init_

STABILITY_C1 = 1e-6
STABILITY_C2 = 1e-6
NORM_EPS = 1e-10
# Slack on the normalization check: finite-difference probes and half-finished
# optimizer steps move weights by ~1e-5, which is not "unnormalized" usage.
WEIGHT_SUM_TOL = 1e-3


def texture_structure_similarity(x, y, c1=STABILITY_C1, c2=STABILITY_C2):
    """Per-channel mean-based and covariance-based similarity of two maps.

    x, y: (B, C, H, W) tensors. Returns (l, s), each (B, C):
    l = (2 mx my + c1) / (mx^2 + my^2 + c1),
    s = (2 cov + c2) / (vx + vy + c2).
    Identical inputs give exactly 1 in both (same numerator and denominator).
    """
    if x.ndim != 4 or x.shape != y.shape:
        raise ShapeError(
            f"expected matching (B, C, H, W) maps, got {tuple(x.shape)} vs {tuple(y.shape)}"
        )
    mx = x.mean(dim=(2, 3))
    my = y.mean(dim=(2, 3))
    vx = (x * x).mean(dim=(2, 3)) - mx * mx
    vy = (y * y).mean(dim=(2, 3)) - my * my
    cov = (x * y).mean(dim=(2, 3)) - mx * my
    l = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    s = (2 * cov + c2) / (vx + vy + c2)
    return l, s


def unit_normalize(f: torch.Tensor) -> torch.Tensor:
    """Normalize each spatial position's channel vector to unit length.

    Zero vectors stay zero (their norm is replaced by a small constant).
    Dividing by the norm itself, rather than norm+eps, keeps the result
    exactly invariant to power-of-two feature rescaling.
    """
    norm = f.square().sum(dim=1, keepdim=True).sqrt()
    denom = torch.where(norm > 0, norm, torch.full_like(norm, NORM_EPS))
    return f / denom


# ----------------------------------------------------------- stage extractors

# recipe entries: ("C", name, cin, cout, kernel, stride, pad),
#                 ("P", kernel, stride), ("T",) taps the running activation

_RECIPES = {
    "vgg16": dict(
        include_input=True,
        steps=[
            ("C", "conv1_1", 3, 64, 3, 1, 1), ("C", "conv1_2", 64, 64, 3, 1, 1), ("T",),
            ("P", 2, 2),
            ("C", "conv2_1", 64, 128, 3, 1, 1), ("C", "conv2_2", 128, 128, 3, 1, 1), ("T",),
            ("P", 2, 2),
            ("C", "conv3_1", 128, 256, 3, 1, 1), ("C", "conv3_2", 256, 256, 3, 1, 1),
            ("C", "conv3_3", 256, 256, 3, 1, 1), ("T",),
            ("P", 2, 2),
            ("C", "conv4_1", 256, 512, 3, 1, 1), ("C", "conv4_2", 512, 512, 3, 1, 1),
            ("C", "conv4_3", 512, 512, 3, 1, 1), ("T",),
            ("P", 2, 2),
            ("C", "conv5_1", 512, 512, 3, 1, 1), ("C", "conv5_2", 512, 512, 3, 1, 1),
            ("C", "conv5_3", 512, 512, 3, 1, 1), ("T",),
        ],
    ),
    "alexnet": dict(
        include_input=False,
        steps=[
            ("C", "conv1", 3, 64, 11, 4, 2), ("T",),
            ("P", 3, 2),
            ("C", "conv2", 64, 192, 5, 1, 2), ("T",),
            ("P", 3, 2),
            ("C", "conv3", 192, 384, 3, 1, 1), ("T",),
            ("C", "conv4", 384, 256, 3, 1, 1), ("T",),
            ("C", "conv5", 256, 256, 3, 1, 1), ("T",),
        ],
    ),
    # same tap/pool topology, tiny widths, for fast tests
    "vgg_stub": dict(
        include_input=True,
        steps=[
            ("C", "conv1", 3, 4, 3, 1, 1), ("T",),
            ("P", 2, 2),
            ("C", "conv2", 4, 5, 3, 1, 1), ("T",),
            ("P", 2, 2),
            ("C", "conv3", 5, 6, 3, 1, 1), ("T",),
            ("P", 2, 2),
            ("C", "conv4", 6, 7, 3, 1, 1), ("T",),
            ("P", 2, 2),
            ("C", "conv5", 7, 8, 3, 1, 1), ("T",),
        ],
    ),
    "alexnet_stub": dict(
        include_input=False,
        steps=[
            ("C", "conv1", 3, 4, 3, 2, 1), ("T",),
            ("P", 2, 2),
            ("C", "conv2", 4, 5, 3, 1, 1), ("T",),
            ("P", 2, 2),
            ("C", "conv3", 5, 6, 3, 1, 1), ("T",),
            ("C", "conv4", 6, 7, 3, 1, 1), ("T",),
            ("C", "conv5", 7, 8, 3, 1, 1), ("T",),
        ],
    ),
}


class StageExtractor(nn.Module):
    """Frozen conv stack emitting the tapped post-ReLU stage activations."""

    def __init__(self, kind: str, seed: int = 0, weights=None, prefix: str = ""):
        super().__init__()
        if kind not in _RECIPES:
            raise ConfigError(f"unknown extractor kind {kind!r}")
        self.kind = kind
        recipe = _RECIPES[kind]
        self.include_input = recipe["include_input"]
        self.convs = nn.ModuleDict()
        channels = [3] if self.include_input else []
        for step in recipe["steps"]:
            if step[0] == "C":
                _, name, cin, cout, k, s, p = step
                self.convs[name] = nn.Conv2d(cin, cout, k, stride=s, padding=p)
                last = cout
            elif step[0] == "T":
                channels.append(last)
        self.stage_channels = tuple(channels)
        self._steps = recipe["steps"]
        seeded_init_(self, seed)
        if weights is not None:
            state, _ = load_checkpoint(weights)
            load_into_module(self, state, prefix=prefix)
        self.requires_grad_(False)

    def forward(self, x):
        taps = [x] if self.include_input else []
        for step in self._steps:
            if step[0] == "C":
                x = F.relu(self.convs[step[1]](x))
            elif step[0] == "P":
                x = F.max_pool2d(x, kernel_size=step[1], stride=step[2])
            else:
                taps.append(x)
        return taps


def build_vgg16(weights=None, seed=0):
    return StageExtractor("vgg16", seed=seed, weights=weights, prefix="vgg.")


def build_alexnet(weights=None, seed=0):
    return StageExtractor("alexnet", seed=seed, weights=weights, prefix="alexnet.")


def vgg_stage_features(extractor: StageExtractor, img: np.ndarray):
    """Stage activations for one [0,1] image, channel normalization applied.

    Returns a list of (C, H, W) tensors; the first entry is the normalized
    image itself when the extractor taps its input.
    """
    images.validate_image(img)
    x = _to_input(img)
    with torch.no_grad():
        return [t[0] for t in extractor(x[None])]


# --------------------------------------------------------------- the metric


class DpisParams(nn.Module):
    """Learned state: channel weights, fusion layers, and the blend scalar."""

    def __init__(self, vgg_channels, alex_channels):
        super().__init__()
        total = sum(vgg_channels)
        self.alpha = nn.ParameterList(
            nn.Parameter(torch.full((c,), 0.5 / total)) for c in vgg_channels
        )
        self.beta = nn.ParameterList(
            nn.Parameter(torch.full((c,), 0.5 / total)) for c in vgg_channels
        )
        self.psi = nn.ParameterList(
            nn.Parameter(torch.ones(c)) for c in alex_channels
        )
        self.fc_sim = nn.Linear(2, 1)
        self.fc_l2 = nn.Linear(2, 1)
        for fc in (self.fc_sim, self.fc_l2):
            with torch.no_grad():
                fc.weight.fill_(0.5)
                fc.bias.zero_()  # zero bias keeps distance(x, x) at 0
        # shape (1,) rather than 0-d so it survives the archive format
        self.gamma = nn.Parameter(torch.tensor([0.5]))


class Dpis(nn.Module):
    def __init__(self, vgg: StageExtractor | None = None,
                 alex: StageExtractor | None = None, seed: int = 0):
        super().__init__()
        self.vgg = vgg if vgg is not None else build_vgg16(seed=seed)
        self.alex = alex if alex is not None else build_alexnet(seed=seed + 1)
        self.params = DpisParams(self.vgg.stage_channels, self.alex.stage_channels)

    def config_dict(self):
        return {
            "model": "dpis",
            "vgg_kind": self.vgg.kind,
            "alexnet_kind": self.alex.kind,
        }

    @torch.no_grad()
    def _check_similarity_weights(self):
        total = 0.0
        for plist in (self.params.alpha, self.params.beta):
            for p in plist:
                if float(p.min()) < -WEIGHT_SUM_TOL:
                    raise ParameterError("similarity weights must be nonnegative")
                total += float(p.sum())
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise ParameterError(
                f"similarity weights must sum to 1, got {total:.8f}; "
                "call project_parameters() after updates"
            )

    def similarity_distance(self, x, y):
        """1 - sum of weighted per-channel similarities over all VGG stages."""
        self._check_similarity_weights()
        feats_x = self.vgg(x)
        feats_y = self.vgg(y)
        total = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        for i, (fx, fy) in enumerate(zip(feats_x, feats_y)):
            l, s = texture_structure_similarity(fx, fy)
            total = total + (self.params.alpha[i] * l).sum(dim=-1)
            total = total + (self.params.beta[i] * s).sum(dim=-1)
        return 1.0 - total

    def l2_distance(self, x, y):
        """Sum over AlexNet stages of psi-scaled unit-normalized sq. errors."""
        feats_x = self.alex(x)
        feats_y = self.alex(y)
        total = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        for i, (fx, fy) in enumerate(zip(feats_x, feats_y)):
            diff = (unit_normalize(fx) - unit_normalize(fy)).square()
            per_channel = diff.mean(dim=(2, 3))
            total = total + (self.params.psi[i] * per_channel).sum(dim=-1)
        return total

    def _fuse(self, fc, image_term, gradient_term):
        return fc(torch.stack([image_term, gradient_term], dim=-1)).squeeze(-1)

    def d1(self, x, y, gx, gy):
        return self._fuse(
            self.params.fc_sim,
            self.similarity_distance(x, y),
            self.similarity_distance(gx, gy),
        )

    def d2(self, x, y, gx, gy):
        return self._fuse(
            self.params.fc_l2,
            self.l2_distance(x, y),
            self.l2_distance(gx, gy),
        )

    def forward(self, x, y, gx, gy):
        """Blend of the two branch distances, (B,) per pair.

        All four inputs are normalized (B, 3, H, W) tensors: the image pair
        and the pair of gradient maps.
        """
        g = self.params.gamma
        return g * self.d1(x, y, gx, gy) + (1 - g) * self.d2(x, y, gx, gy)

    @torch.no_grad()
    def project_parameters(self):
        """Restore the parameter-range invariants after an optimizer step."""
        for plist in (self.params.alpha, self.params.beta, self.params.psi):
            for p in plist:
                p.clamp_(min=0.0)
        total = sum(float(p.sum()) for p in self.params.alpha)
        total += sum(float(p.sum()) for p in self.params.beta)
        if total <= 0:
            raise ParameterError("all similarity weights collapsed to zero")
        for plist in (self.params.alpha, self.params.beta):
            for p in plist:
                p.div_(total)
        self.params.gamma.clamp_(0.0, 1.0)


# ------------------------------------------------------------- scoring ops


def _to_input(img: np.ndarray) -> torch.Tensor:
    arr = images.normalize(
        img, images.DEFAULT_CHANNEL_MEAN, images.DEFAULT_CHANNEL_STD
    )
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)


def _pair(x, y):
    images.validate_image(x)
    images.validate_image(y)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    return _to_input(x)[None], _to_input(y)[None]


def _gradient_pair(x, y):
    return (
        _to_input(images.gradient_map(x))[None],
        _to_input(images.gradient_map(y))[None],
    )


def dpis_similarity_distance(model: Dpis, x: np.ndarray, y: np.ndarray) -> float:
    tx, ty = _pair(x, y)
    with torch.no_grad():
        return float(model.similarity_distance(tx, ty)[0])


def alexnet_l2_distance(model: Dpis, x: np.ndarray, y: np.ndarray) -> float:
    tx, ty = _pair(x, y)
    with torch.no_grad():
        return float(model.l2_distance(tx, ty)[0])


def d1_distance(model: Dpis, x: np.ndarray, y: np.ndarray) -> float:
    tx, ty = _pair(x, y)
    gx, gy = _gradient_pair(x, y)
    with torch.no_grad():
        return float(model.d1(tx, ty, gx, gy)[0])


def dpis_distance(model: Dpis, x: np.ndarray, y: np.ndarray) -> float:
    tx, ty = _pair(x, y)
    gx, gy = _gradient_pair(x, y)
    with torch.no_grad():
        return float(model(tx, ty, gx, gy)[0])


# ------------------------------------------------------------- persistence


def save_dpis(path, model: Dpis, extra_config: dict | None = None) -> None:
    state = module_state(model.vgg, "vgg.")
    state.update(module_state(model.alex, "alexnet."))
    state.update(module_state(model.params, "dpis."))
    config = model.config_dict()
    if extra_config:
        config = {**config, **extra_config}
    save_checkpoint(path, state, config)


def load_dpis(path) -> tuple:
    """Rebuild a metric from its archive. Returns (model in eval mode, config)."""
    state, config = load_checkpoint(path)
    if config.get("model") != "dpis":
        raise CheckpointError(
            f"archive {path} does not hold this metric (config says "
            f"{config.get('model')!r})"
        )
    model = Dpis(
        vgg=StageExtractor(config["vgg_kind"]),
        alex=StageExtractor(config["alexnet_kind"]),
    )
    load_into_module(model.vgg, state, "vgg.")
    load_into_module(model.alex, state, "alexnet.")
    load_into_module(model.params, state, "dpis.")
    model.eval()
    return model, config
