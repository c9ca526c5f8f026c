"""Assembled image-pair distance model: shared backbone plus distance head.

Both images run through the same backbone, their fused pyramids go through
the head's mapping mode, and the result is a scalar distance in (0, 1) per
pair. Checkpoints store the backbone under "backbone." and the head under
"head.", with the full model config echoed into the archive.
"""

import numpy as np
import torch
from torch import nn

from . import images
from .checkpoint import load_checkpoint, load_into_module, module_state, save_checkpoint
from .errors import CheckpointError, ShapeError
from .head import DistanceHead, MappingMode
from .swin import BackboneConfig, SwinBackbone, fuse_pyramid_maps


class SwinIQA(nn.Module):
    def __init__(self, backbone_config: BackboneConfig | None = None,
                 mode=MappingMode.CROSS_ATTN, dim: int = 256, heads: int = 4,
                 seed: int = 0):
        super().__init__()
        cfg = backbone_config or BackboneConfig()
        self.backbone = SwinBackbone(cfg, seed=seed)
        self.head = DistanceHead(
            cfg.fused_channels, mode=mode, dim=dim, heads=heads, seed=seed + 1
        )

    @property
    def mode(self):
        return self.head.mode

    def fused(self, x: torch.Tensor) -> torch.Tensor:
        return fuse_pyramid_maps(self.backbone(x))

    def forward(self, ref: torch.Tensor, dist: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) normalized pairs -> (B,) distances in (0, 1)."""
        return self.head(self.fused(ref), self.fused(dist))

    def config_dict(self):
        return {
            "model": "swiniqa",
            "backbone": self.backbone.config.to_dict(),
            "head": self.head.config_dict(),
        }


def save_swiniqa(path, model: SwinIQA, extra_config: dict | None = None) -> None:
    state = module_state(model.backbone, "backbone.")
    state.update(module_state(model.head, "head."))
    config = model.config_dict()
    if extra_config:
        config = {**config, **extra_config}
    save_checkpoint(path, state, config)


def load_swiniqa(path) -> tuple:
    """Rebuild a model from its archive. Returns (model in eval mode, config)."""
    state, config = load_checkpoint(path)
    if config.get("model") != "swiniqa":
        raise CheckpointError(
            f"archive {path} does not hold this model family (config says "
            f"{config.get('model')!r})"
        )
    bb_cfg = BackboneConfig.from_dict(config["backbone"])
    hd = config["head"]
    model = SwinIQA(bb_cfg, mode=hd["mode"], dim=hd["dim"], heads=hd["heads"])
    load_into_module(model.backbone, state, "backbone.")
    load_into_module(model.head, state, "head.")
    model.eval()
    return model, config


def to_model_input(img: np.ndarray) -> torch.Tensor:
    """[0,1] (H, W, 3) array -> normalized (3, H, W) float32 tensor."""
    arr = images.normalize(
        img, images.DEFAULT_CHANNEL_MEAN, images.DEFAULT_CHANNEL_STD
    )
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)


def score_pair(model: SwinIQA, ref: np.ndarray, dist: np.ndarray) -> float:
    """Distance for one full image pair, reflect-padding to a legal size."""
    images.validate_image(ref)
    images.validate_image(dist)
    if ref.shape != dist.shape:
        raise ShapeError(f"image shapes differ: {ref.shape} vs {dist.shape}")
    mult = model.backbone.config.input_multiple
    h, w = ref.shape[:2]
    th = ((h + mult - 1) // mult) * mult
    tw = ((w + mult - 1) // mult) * mult
    ref = images.reflect_pad_to(ref, th, tw)
    dist = images.reflect_pad_to(dist, th, tw)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            d = model(to_model_input(ref)[None], to_model_input(dist)[None])
    finally:
        model.train(was_training)
    return float(d[0])
