"""Two-stage training: quality-score pretraining, then joint 2AFC training.

Stage one fits the distance model to per-pair quality targets s = 1 - mos/5
with squared error. Stage two interleaves triplet batches (binary
cross-entropy through a small judgment network over distance features) with
quality batches, combining the losses as bce + lambda_reg * reg and updating
the distance model and judgment network together.

Datasets are line-delimited JSON manifests with paths relative to a root
directory. Loading is sequential and all randomness flows from one seeded
generator, so a fixed seed reproduces runs bit for bit.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import images
from .checkpoint import load_checkpoint, load_into_module, module_state, save_checkpoint
from .errors import ConfigError, DataError
from .swin import seeded_init_
from .swiniqa import save_swiniqa, to_model_input

DIV_EPS = 1e-6
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lambda_reg: float = 5.0
    pretrain_lr: float = 1e-4
    pretrain_epochs: int = 50
    pretrain_batch: int = 48
    joint_lr: float = 5e-5
    judgment_lr: float = 5e-5
    joint_epochs: int = 50
    joint_batch: int = 16
    crop: int = 224
    seed: int = 0
    eps_div: float = DIV_EPS
    freeze_backbone: bool = False
    # sequential single-worker loading is always used; the flag is recorded
    # in checkpoint configs so runs advertise their reproducibility mode
    strict: bool = True

    def __post_init__(self):
        for name in ("pretrain_lr", "joint_lr", "judgment_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be nonnegative")
        for name in ("pretrain_epochs", "pretrain_batch", "joint_epochs",
                     "joint_batch", "crop"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")


@dataclass(frozen=True)
class MosSample:
    ref_path: Path
    dist_path: Path
    mos: float
    s: float


@dataclass(frozen=True)
class TripletSample:
    ref_path: Path
    dist_a_path: Path
    dist_b_path: Path
    h: float


def mos_to_s(mos: float, record: str = "") -> float:
    """s = 1 - mos/5, the pretraining target; raises on out-of-range scores."""
    if not 0.0 <= mos <= 5.0:
        where = f" in {record}" if record else ""
        raise DataError(f"mos {mos!r}{where} outside [0, 5]")
    return 1.0 - mos / 5.0


def _read_manifest_lines(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}: line {lineno}: record is not an object")
            records.append((lineno, obj))
    return path, records


def _resolve(root, rel, path, lineno, field):
    out = Path(root) / rel
    if not out.is_file():
        raise DataError(f"{path}: line {lineno}: {field} image not found: {out}")
    return out


def _field(obj, name, path, lineno):
    if name not in obj:
        raise DataError(f"{path}: line {lineno}: missing field {name!r}")
    return obj[name]


def load_mos_manifest(path, root) -> list:
    """Records: {"ref": ..., "dist": ..., "mos": real}. s is always recomputed."""
    path, records = _read_manifest_lines(path)
    samples = []
    for lineno, obj in records:
        mos = _field(obj, "mos", path, lineno)
        if not isinstance(mos, (int, float)) or isinstance(mos, bool):
            raise DataError(f"{path}: line {lineno}: mos must be a number")
        s = mos_to_s(float(mos), record=f"{path}: line {lineno}")
        samples.append(MosSample(
            ref_path=_resolve(root, _field(obj, "ref", path, lineno), path, lineno, "ref"),
            dist_path=_resolve(root, _field(obj, "dist", path, lineno), path, lineno, "dist"),
            mos=float(mos),
            s=s,
        ))
    return samples


def load_triplet_manifest(path, root) -> list:
    """Records: {"ref": ..., "dist_a": ..., "dist_b": ..., "h": real in [0,1]}."""
    path, records = _read_manifest_lines(path)
    samples = []
    for lineno, obj in records:
        h = _field(obj, "h", path, lineno)
        if not isinstance(h, (int, float)) or isinstance(h, bool):
            raise DataError(f"{path}: line {lineno}: h must be a number")
        if not 0.0 <= float(h) <= 1.0:
            raise DataError(f"{path}: line {lineno}: h {h!r} outside [0, 1]")
        samples.append(TripletSample(
            ref_path=_resolve(root, _field(obj, "ref", path, lineno), path, lineno, "ref"),
            dist_a_path=_resolve(
                root, _field(obj, "dist_a", path, lineno), path, lineno, "dist_a"),
            dist_b_path=_resolve(
                root, _field(obj, "dist_b", path, lineno), path, lineno, "dist_b"),
            h=float(h),
        ))
    return samples


# ------------------------------------------------------------------ losses


def reg_loss(d, s):
    """Mean squared error between distance scores and quality targets.

    Evaluated at double precision so logged losses satisfy their closed
    forms exactly; gradients still flow to single-precision parameters.
    """
    return ((d.double() - s.double()) ** 2).mean()


def bce_loss(h_hat, h):
    """Binary cross-entropy with predictions clamped away from the log poles."""
    p = h_hat.double().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    target = h.double()
    return (-(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))).mean()


def total_loss(bce, reg, lambda_reg):
    return bce + lambda_reg * reg


# ---------------------------------------------------------- judgment net


def judgment_features(d1, d2, eps: float = DIV_EPS):
    """[d1, d2, d1-d2, d1/(d2+eps), d2/(d1+eps)] along the last axis."""
    return torch.stack(
        [d1, d2, d1 - d2, d1 / (d2 + eps), d2 / (d1 + eps)], dim=-1
    )


class JudgmentNet(nn.Module):
    """5 -> 32 -> 32 -> 1 with ReLU, ReLU, sigmoid; output strictly in (0,1)."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.fc1 = nn.Linear(5, 32)
        self.fc2 = nn.Linear(32, 32)
        self.fc3 = nn.Linear(32, 1)
        seeded_init_(self, seed)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        z = torch.relu(self.fc1(feat))
        z = torch.relu(self.fc2(z))
        return torch.sigmoid(self.fc3(z)).squeeze(-1)


# ----------------------------------------------------------- batch loading


def _load_cached(cache: dict, path) -> np.ndarray:
    key = str(path)
    if key not in cache:
        cache[key] = images.load_image(path)
    return cache[key]


def _crop_group(rng, group, crop, multiple):
    """One shared random crop for every image of a pair or triplet.

    The effective size is min(crop, image sides) rounded down to the model's
    input multiple, so undersized images simply train on their largest
    usable square.
    """
    first = group[0]
    for other in group[1:]:
        if other.shape != first.shape:
            raise DataError(
                f"images in a training group differ in shape: "
                f"{first.shape} vs {other.shape}"
            )
    h, w = first.shape[:2]
    size = (min(crop, h, w) // multiple) * multiple
    if size == 0:
        raise DataError(
            f"image {h}x{w} too small for input multiple {multiple}"
        )
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return [images.crop_at(img, top, left, size) for img in group]


def load_pair_batch(samples, idx, config, rng, cache, multiple):
    refs, dists, targets = [], [], []
    for i in idx:
        sample = samples[int(i)]
        ref = _load_cached(cache, sample.ref_path)
        dist = _load_cached(cache, sample.dist_path)
        ref_c, dist_c = _crop_group(rng, [ref, dist], config.crop, multiple)
        refs.append(to_model_input(ref_c))
        dists.append(to_model_input(dist_c))
        targets.append(sample.s)
    return torch.stack(refs), torch.stack(dists), torch.tensor(targets)


def load_triplet_batch(samples, idx, config, rng, cache, multiple):
    refs, dist_as, dist_bs, votes = [], [], [], []
    for i in idx:
        sample = samples[int(i)]
        group = [
            _load_cached(cache, sample.ref_path),
            _load_cached(cache, sample.dist_a_path),
            _load_cached(cache, sample.dist_b_path),
        ]
        ref_c, a_c, b_c = _crop_group(rng, group, config.crop, multiple)
        refs.append(to_model_input(ref_c))
        dist_as.append(to_model_input(a_c))
        dist_bs.append(to_model_input(b_c))
        votes.append(sample.h)
    return (
        torch.stack(refs),
        torch.stack(dist_as),
        torch.stack(dist_bs),
        torch.tensor(votes),
    )


def _batched(order, batch_size):
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def _trainable(model):
    return [p for p in model.parameters() if p.requires_grad]


# -------------------------------------------------------------- stage one


def pretrain(model, samples, config: TrainConfig, checkpoint_path=None) -> list:
    """Fit distance scores to s targets; returns the per-epoch mean loss log."""
    if not samples:
        raise ConfigError("MOS dataset is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    cache = {}
    multiple = model.backbone.config.input_multiple
    if config.freeze_backbone:
        model.backbone.requires_grad_(False)
    optimizer = torch.optim.Adam(_trainable(model), lr=config.pretrain_lr)
    log = []
    model.train()
    for _ in range(config.pretrain_epochs):
        order = rng.permutation(len(samples))
        epoch_losses = []
        for idx in _batched(order, config.pretrain_batch):
            refs, dists, targets = load_pair_batch(
                samples, idx, config, rng, cache, multiple
            )
            loss = reg_loss(model(refs, dists), targets)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        log.append(float(np.mean(epoch_losses)))
    model.eval()
    if checkpoint_path is not None:
        save_swiniqa(checkpoint_path, model,
                     {"stage": "pretrain", "train": asdict(config)})
    return log


# -------------------------------------------------------------- stage two


def train_joint(model, judgment, triplets, mos_samples, config: TrainConfig,
                checkpoint_path=None, step_log=None) -> list:
    """Alternate triplet and quality batches every step, updating both nets.

    Returns the per-epoch mean total-loss log. When step_log is a list, a
    (bce, reg, total) float tuple is appended for every step taken.
    """
    if not triplets:
        raise ConfigError("triplet dataset is empty")
    if not mos_samples:
        raise ConfigError("MOS dataset is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    cache = {}
    multiple = model.backbone.config.input_multiple
    if config.freeze_backbone:
        model.backbone.requires_grad_(False)
    model_opt = torch.optim.Adam(_trainable(model), lr=config.joint_lr)
    judgment_opt = torch.optim.Adam(judgment.parameters(), lr=config.judgment_lr)
    log = []
    model.train()
    judgment.train()
    for _ in range(config.joint_epochs):
        triplet_batches = _batched(rng.permutation(len(triplets)), config.joint_batch)
        mos_batches = _batched(rng.permutation(len(mos_samples)), config.joint_batch)
        epoch_losses = []
        for step, t_idx in enumerate(triplet_batches):
            refs, dist_as, dist_bs, votes = load_triplet_batch(
                triplets, t_idx, config, rng, cache, multiple
            )
            d1 = model(refs, dist_as)
            d2 = model(refs, dist_bs)
            h_hat = judgment(judgment_features(d1, d2, config.eps_div))
            bce = bce_loss(h_hat, votes)

            m_idx = mos_batches[step % len(mos_batches)]
            refs_m, dists_m, targets = load_pair_batch(
                mos_samples, m_idx, config, rng, cache, multiple
            )
            reg = reg_loss(model(refs_m, dists_m), targets)

            loss = total_loss(bce, reg, config.lambda_reg)
            model_opt.zero_grad()
            judgment_opt.zero_grad()
            loss.backward()
            model_opt.step()
            judgment_opt.step()
            epoch_losses.append(float(loss.detach()))
            if step_log is not None:
                step_log.append(
                    (float(bce.detach()), float(reg.detach()), float(loss.detach()))
                )
        log.append(float(np.mean(epoch_losses)))
    model.eval()
    judgment.eval()
    if checkpoint_path is not None:
        save_joint_checkpoint(checkpoint_path, model, judgment,
                              {"stage": "joint", "train": asdict(config)})
    return log


# ------------------------------------------------------------ persistence


def save_joint_checkpoint(path, model, judgment, extra_config=None) -> None:
    """Model weights plus the judgment network in a single archive."""
    state = module_state(model.backbone, "backbone.")
    state.update(module_state(model.head, "head."))
    state.update(module_state(judgment, "judgment."))
    config = model.config_dict()
    config["judgment"] = {"features": 5, "hidden": 32}
    if extra_config:
        config = {**config, **extra_config}
    save_checkpoint(path, state, config)


def load_judgment(path) -> JudgmentNet:
    """Judgment network from an archive written by save_joint_checkpoint."""
    state, _ = load_checkpoint(path)
    net = JudgmentNet()
    load_into_module(net, state, "judgment.")
    net.eval()
    return net
