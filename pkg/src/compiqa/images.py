"""Image decoding, normalization, patch extraction, and gradient maps.

All functions work on "image tensors": numpy arrays of shape (H, W, 3),
values in [0, 1], channel order R, G, B. Everything here is a pure
function of its inputs and safe to call from concurrent workers.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DecodeError, FormatError, ParameterError, ShapeError

# Standard channel statistics of the backbones' pretraining corpus. These are
# defaults for the config objects that carry them; nothing normalizes with
# them implicitly.
DEFAULT_CHANNEL_MEAN = (0.485, 0.456, 0.406)
DEFAULT_CHANNEL_STD = (0.229, 0.224, 0.225)

# Rec.601 luma coefficients.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


@dataclasses.dataclass(frozen=True)
class PatchSpec:
    """How to cut patches out of a full image.

    size: square patch side in pixels.
    stride: grid step for `patch_grid`.
    seed: RNG seed used by `random_crop`.
    """

    size: int = 224
    stride: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise ParameterError(f"patch size must be >= 1, got {self.size}")
        if self.stride < 1:
            raise ParameterError(f"patch stride must be >= 1, got {self.stride}")


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check the (H, W, 3), finite, [0, 1] contract and return the array."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) array, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"image must be at least 1x1, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise FormatError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise FormatError(
            f"image values outside [0, 1]: min={img.min():.4g} max={img.max():.4g}"
        )
    return img


def load_image(path) -> np.ndarray:
    """Decode an 8- or 16-bit raster file to a float32 (H, W, 3) array in [0, 1].

    Grayscale inputs are replicated to 3 channels; palette images are
    expanded to RGB. Anything with another channel count (RGBA, CMYK, ...)
    is rejected.
    """
    path = str(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGB")
                mode = "RGB"
            if mode not in ("L", "I", "RGB") and not mode.startswith("I;16"):
                raise FormatError(
                    f"unsupported image mode {mode!r} in {path}: "
                    "expected 8/16-bit grayscale or RGB"
                )
            arr = np.asarray(im)
    except FormatError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode image file {path}: {exc}") from exc

    if arr.dtype == np.uint8:
        out = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        out = arr.astype(np.float32) / 65535.0
    elif arr.dtype == np.int32:
        # PIL mode "I": 16-bit data widened to 32-bit storage.
        out = arr.astype(np.float32) / 65535.0
    else:
        raise DecodeError(f"cannot decode image file {path}: pixel dtype {arr.dtype}")

    if out.ndim == 2:
        out = np.repeat(out[:, :, None], 3, axis=2)
    elif out.ndim != 3 or out.shape[2] != 3:
        raise FormatError(
            f"unsupported channel count {out.shape[-1] if out.ndim == 3 else 1} in {path}"
        )
    return np.clip(out, 0.0, 1.0)


def save_image(img: np.ndarray, path) -> None:
    """Write an image tensor as an 8-bit raster file (format from the suffix)."""
    img = validate_image(img)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(str(path))


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    """Per-channel (img - mean) / std. `std` components must be positive."""
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 1, -1)
    std = np.asarray(std, dtype=np.float64).reshape(1, 1, -1)
    if np.any(std <= 0):
        raise ParameterError(f"std components must be strictly positive, got {std.ravel()}")
    return (np.asarray(img) - mean) / std


def denormalize(arr: np.ndarray, mean, std) -> np.ndarray:
    """Inverse of `normalize`."""
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 1, -1)
    std = np.asarray(std, dtype=np.float64).reshape(1, 1, -1)
    if np.any(std <= 0):
        raise ParameterError(f"std components must be strictly positive, got {std.ravel()}")
    return np.asarray(arr) * std + mean


def reflect_pad_to(img: np.ndarray, min_h: int, min_w: int) -> np.ndarray:
    """Mirror-pad (edge sample included) until the image is at least min_h x min_w.

    Padding is split evenly between both sides. Images much smaller than the
    target are mirrored repeatedly.
    """
    img = np.asarray(img)
    while img.shape[0] < min_h or img.shape[1] < min_w:
        need_h = max(0, min_h - img.shape[0])
        need_w = max(0, min_w - img.shape[1])
        # np.pad "symmetric" allows at most one full mirror per call.
        ph = min(need_h, 2 * img.shape[0])
        pw = min(need_w, 2 * img.shape[1])
        pads = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0))
        img = np.pad(img, pads, mode="symmetric")
    return img


def crop_at(img: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    """Contiguous size x size window with its top-left corner at (top, left)."""
    h, w = img.shape[:2]
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise ShapeError(
            f"crop ({top},{left})+{size} does not fit inside a {h}x{w} image"
        )
    return img[top : top + size, left : left + size]


def random_crop(img: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Uniform random size x size crop, deterministic in spec.seed.

    Images smaller than the patch are reflect-padded up to it first.
    """
    img = reflect_pad_to(np.asarray(img), spec.size, spec.size)
    h, w = img.shape[:2]
    rng = np.random.default_rng(spec.seed)
    top = int(rng.integers(0, h - spec.size + 1))
    left = int(rng.integers(0, w - spec.size + 1))
    return crop_at(img, top, left, spec.size)


def grid_offsets(dim: int, size: int, stride: int) -> list[int]:
    """Start offsets along one axis: multiples of stride, last shifted inward."""
    if dim < size:
        raise ShapeError(f"dimension {dim} smaller than patch size {size}")
    offsets = list(range(0, dim - size + 1, stride))
    if offsets[-1] != dim - size:
        offsets.append(dim - size)
    return offsets


def patch_grid(img: np.ndarray, spec: PatchSpec) -> list[np.ndarray]:
    """Row-major overlapping grid of size x size patches covering every pixel.

    The last row/column is shifted inward so all patches hold real content;
    undersized images are reflect-padded first.
    """
    img = reflect_pad_to(np.asarray(img), spec.size, spec.size)
    h, w = img.shape[:2]
    return [
        crop_at(img, top, left, spec.size)
        for top in grid_offsets(h, spec.size, spec.stride)
        for left in grid_offsets(w, spec.size, spec.stride)
    ]


def luminance(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an image tensor, shape (H, W), float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) array, got shape {img.shape}")
    return img @ _LUMA_WEIGHTS


def gradient_map(img: np.ndarray) -> np.ndarray:
    """Edge-magnitude image: Sobel on Rec.601 luma, max-normalized, 3-channel.

    Correlates the luma plane with the standard 3x3 Sobel kernels under
    reflect padding (edge sample repeated), takes sqrt(Gx^2 + Gy^2), divides
    by the maximum response (an all-zero map stays zero), and replicates the
    result to 3 channels so it can feed the same backbones as an image.
    """
    lum = luminance(img)
    gx = ndimage.correlate(lum, _SOBEL_X, mode="reflect")
    gy = ndimage.correlate(lum, _SOBEL_Y, mode="reflect")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    # flat images leave only float residue (~1e-17); do not inflate it to 1
    if peak > 1e-12:
        mag = mag / peak
    else:
        mag = np.zeros_like(mag)
    return np.repeat(mag[:, :, None], 3, axis=2)
