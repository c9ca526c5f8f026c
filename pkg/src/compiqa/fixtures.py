"""Synthetic graded-distortion fixture for self-contained end-to-end runs.

Generates procedural reference images plus four distortion families at four
graded strengths each, with oracle severity labels baked into the manifests:

* ``noise`` — additive Gaussian noise,
* ``blur``  — Gaussian blur,
* ``block`` — JPEG-like blocking (per-8x8-block DCT truncation),
* ``shift`` — small circular translation.

Every distorted image carries a designed severity ``s`` in [0, 1] (worse is
higher); the MOS manifest stores ``mos = 5 * (1 - s)`` and the triplet
manifest stores the oracle vote ``h = 1.0`` iff image B has the lower
severity. The shift family is deliberately mild perceptually (s <= 0.25)
while being pixel-wise large, so plain PSNR misjudges most triplets that pit
a shifted image against a noisy/blurred/blocky one. That keeps a trained
metric's headroom over the PSNR baseline measurable without external data.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import gaussian_filter, zoom

from .errors import ConfigError, ParameterError
from .images import save_image, validate_image

FAMILIES = ("noise", "blur", "block", "shift")
N_LEVELS = 4

# Designed severities per family/level. Values are spaced so that adjacent
# shift levels fall under the default triplet separation threshold (their
# perceptual ordering would be too close to call), while every cross-family
# comparison against shift is unambiguous.
SEVERITIES = {
    "noise": (0.30, 0.45, 0.60, 0.75),
    "blur": (0.25, 0.40, 0.55, 0.70),
    "block": (0.35, 0.50, 0.65, 0.80),
    "shift": (0.10, 0.15, 0.20, 0.25),
}

NOISE_SIGMA = (0.06, 0.11, 0.18, 0.28)
BLUR_SIGMA = (0.8, 1.4, 2.2, 3.4)
BLOCK_KEPT = (4, 3, 2, 1)  # DCT coefficients kept per 8x8 block (n x n corner)
SHIFT_PX = (1, 2, 3, 4)  # circular roll applied to both axes

BLOCK_SIZE = 8


@dataclass(frozen=True)
class FixtureSpec:
    n_refs: int = 20
    size: int = 64
    n_triplets: int = 500
    min_sep: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.n_refs < 1:
            raise ConfigError("n_refs must be at least 1")
        if self.size < 32 or self.size % BLOCK_SIZE != 0:
            raise ConfigError(
                f"size must be >= 32 and a multiple of {BLOCK_SIZE}, got {self.size}"
            )
        if self.n_triplets < 1:
            raise ConfigError("n_triplets must be at least 1")
        if not 0.0 < self.min_sep < 0.5:
            raise ConfigError("min_sep must be in (0, 0.5)")


@dataclass(frozen=True)
class FixtureSummary:
    root: str
    n_refs: int
    n_mos: int
    n_triplets: int
    mos_manifest: str
    triplet_manifest: str


def _smooth_field(rng, size, cells, amp):
    """Zero-mean random field with correlation length ~size/cells, std `amp`."""
    grid = rng.normal(0.0, 1.0, (cells, cells))
    field = zoom(grid, size / cells, order=3, mode="reflect", grid_mode=True)
    field -= field.mean()
    return field * (amp / (field.std() + 1e-12))


def reference_image(rng, size=64):
    """Procedural reference: shading + mid-frequency texture + fine detail.

    The mid-frequency texture carries enough variance that a few-pixel shift
    produces a large mean squared error, which is what arms the PSNR trap.
    """
    shading = _smooth_field(rng, size, 5, 0.20)
    texture = _smooth_field(rng, size, 16, 0.16)
    detail = _smooth_field(rng, size, 32, 0.05)
    gray = 0.5 + shading + texture + detail
    img = np.empty((size, size, 3))
    for c in range(3):
        img[:, :, c] = gray + _smooth_field(rng, size, 4, 0.05)
    return np.clip(img, 0.02, 0.98).astype(np.float32)


def _block_dct_truncate(img, keep, block=BLOCK_SIZE):
    h, w, _ = img.shape
    out = np.empty_like(img, dtype=np.float64)
    mask = np.zeros((block, block))
    mask[:keep, :keep] = 1.0
    for c in range(img.shape[2]):
        blocks = img[:, :, c].astype(np.float64).reshape(h // block, block,
                                                         w // block, block)
        coeff = dctn(blocks, axes=(1, 3), norm="ortho")
        coeff *= mask[None, :, None, :]
        out[:, :, c] = idctn(coeff, axes=(1, 3), norm="ortho").reshape(h, w)
    return out


def distort(img, family, level, rng=None):
    """Apply one distortion family at a graded level (0-based, 0..3)."""
    img = validate_image(img)
    if family not in FAMILIES:
        raise ParameterError(f"unknown distortion family {family!r}")
    if not 0 <= level < N_LEVELS:
        raise ParameterError(f"level must be in [0, {N_LEVELS - 1}], got {level}")
    if family == "noise":
        if rng is None:
            raise ParameterError("noise distortion needs an rng")
        out = img + rng.normal(0.0, NOISE_SIGMA[level], img.shape)
    elif family == "blur":
        sigma = BLUR_SIGMA[level]
        out = gaussian_filter(img.astype(np.float64), sigma=(sigma, sigma, 0.0),
                              mode="reflect")
    elif family == "block":
        out = _block_dct_truncate(img, BLOCK_KEPT[level])
    else:  # shift
        px = SHIFT_PX[level]
        out = np.roll(img, (px, px), axis=(0, 1))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _quantized(img):
    """Snap to the 8-bit grid so in-memory arrays match the saved files."""
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def _valid_pairs(min_sep):
    """All (family, level) pairs whose designed severities differ enough."""
    versions = [(f, i) for f in FAMILIES for i in range(N_LEVELS)]
    pairs = []
    for i, a in enumerate(versions):
        for b in versions[i + 1:]:
            if abs(SEVERITIES[a[0]][a[1]] - SEVERITIES[b[0]][b[1]]) >= min_sep:
                pairs.append((a, b))
    return pairs


def make_fixture(out_dir, spec: FixtureSpec = FixtureSpec()) -> FixtureSummary:
    """Write reference/distorted images plus MOS and triplet manifests.

    Layout under `out_dir`::

        refs/ref_00.png ...
        dist/ref00_noise1.png ... dist/ref19_shift4.png
        mos.jsonl        one {ref, dist, mos} record per distorted image
        triplets.jsonl   {ref, dist_a, dist_b, h} records with oracle votes

    Manifest paths are relative to `out_dir`, so the training loaders take
    `root=out_dir`. Fully deterministic for a given spec.
    """
    pairs = _valid_pairs(spec.min_sep)
    if not pairs:
        raise ConfigError(f"min_sep={spec.min_sep} leaves no valid distortion pairs")
    out = Path(out_dir)
    (out / "refs").mkdir(parents=True, exist_ok=True)
    (out / "dist").mkdir(exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    mos_records = []
    dist_rel = {}  # (ref index, family, level) -> relative path
    ref_rels = []
    for r in range(spec.n_refs):
        ref = _quantized(reference_image(rng, spec.size))
        ref_rel = f"refs/ref_{r:02d}.png"
        save_image(ref, out / ref_rel)
        ref_rels.append(ref_rel)
        for family in FAMILIES:
            for level in range(N_LEVELS):
                rel = f"dist/ref{r:02d}_{family}{level + 1}.png"
                save_image(distort(ref, family, level, rng), out / rel)
                dist_rel[(r, family, level)] = rel
                s = SEVERITIES[family][level]
                mos_records.append({
                    "ref": ref_rel,
                    "dist": rel,
                    "mos": round(5.0 * (1.0 - s), 6),
                    "family": family,
                    "level": level + 1,
                })

    triplet_records = []
    for _ in range(spec.n_triplets):
        r = int(rng.integers(spec.n_refs))
        a, b = pairs[int(rng.integers(len(pairs)))]
        if rng.integers(2):
            a, b = b, a
        s_a = SEVERITIES[a[0]][a[1]]
        s_b = SEVERITIES[b[0]][b[1]]
        triplet_records.append({
            "ref": ref_rels[r],
            "dist_a": dist_rel[(r,) + a],
            "dist_b": dist_rel[(r,) + b],
            "h": 1.0 if s_b < s_a else 0.0,
            "s_a": s_a,
            "s_b": s_b,
        })

    mos_manifest = out / "mos.jsonl"
    with open(mos_manifest, "w") as f:
        for rec in mos_records:
            f.write(json.dumps(rec) + "\n")
    triplet_manifest = out / "triplets.jsonl"
    with open(triplet_manifest, "w") as f:
        for rec in triplet_records:
            f.write(json.dumps(rec) + "\n")

    return FixtureSummary(
        root=str(out),
        n_refs=spec.n_refs,
        n_mos=len(mos_records),
        n_triplets=len(triplet_records),
        mos_manifest=str(mos_manifest),
        triplet_manifest=str(triplet_manifest),
    )
