"""Image I/O, paired datasets, patch sampling and synthetic degradations.

All image tensors are float32 in [0, 1], shaped [1, C, H, W].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .config import DatasetSpec
from .tensor import FLOAT32, ShapeError, Tensor

IMAGE_SUFFIXES = (".png", ".ppm")


class ImageFormatError(ValueError):
    pass


class UnpairedDataError(ValueError):
    pass


@dataclass
class ImagePair:
    degraded: Tensor  # [1, 3 or 6, H, W]
    clean: Tensor  # [1, 3, H, W]
    name: str = ""

    def __post_init__(self):
        if self.degraded.shape[2:] != self.clean.shape[2:]:
            raise ShapeError(f"pair extents differ: {self.degraded.shape} vs {self.clean.shape}")


# ---------------------------------------------------------------------------
# I/O

def load_image(path: str | Path) -> Tensor:
    """Decode an 8-bit RGB PNG or binary PPM (P6) to [1,3,H,W] in [0,1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise ImageFormatError(f"{path}: unsupported format {im.format}")
            if im.mode in ("L", "P"):
                im = im.convert("RGB")
            if im.mode != "RGB":
                raise ImageFormatError(f"{path}: unsupported mode {im.mode} (need 8-bit RGB)")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: not a PNG/PPM image") from exc
    except (OSError, SyntaxError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ImageFormatError(f"{path}: truncated or corrupt ({exc})") from exc
    data = arr.astype(np.float32).transpose(2, 0, 1)[None] / np.float32(255)
    return Tensor(data, dtype=FLOAT32)


def quantize(t: Tensor | np.ndarray) -> np.ndarray:
    """[1,3,H,W] in [0,1] -> HxWx3 uint8; clamps, rounds half away from zero."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] != 3:
        raise ShapeError(f"expected [1,3,H,W], got {data.shape}")
    x = np.clip(data[0].astype(np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_image(t: Tensor, path: str | Path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in IMAGE_SUFFIXES:
        raise ImageFormatError(f"{path}: output must be .png or .ppm")
    Image.fromarray(quantize(t), mode="RGB").save(path, format="PNG" if suffix == ".png" else "PPM")


# ---------------------------------------------------------------------------
# degradations

def add_gaussian_noise(clean: Tensor, sigma: float, seed: int) -> Tensor:
    """clip(clean + n/255), n ~ N(0, sigma^2) with sigma on the 0-255 scale."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return Tensor(clean.data.copy(), dtype=clean.dtype)
    noise = np.random.default_rng(seed).standard_normal(clean.shape) * (sigma / 255.0)
    return Tensor(np.clip(clean.data + noise, 0.0, 1.0).astype(clean.dtype), dtype=clean.dtype)


def defocus_dual_pixel(clean: Tensor, blur: float = 1.5, shift: float = 1.0) -> Tensor:
    """Fabricate left/right sub-aperture views: Gaussian blur, then opposite
    horizontal sub-pixel shifts. Returns the 6-channel concatenation."""
    img = clean.data[0].astype(np.float64)
    blurred = ndimage.gaussian_filter(img, sigma=(0, blur, blur), mode="reflect")
    left = ndimage.shift(blurred, (0, 0, shift), order=1, mode="nearest")
    right = ndimage.shift(blurred, (0, 0, -shift), order=1, mode="nearest")
    return dual_pixel_concat(
        Tensor(np.clip(left, 0, 1)[None].astype(np.float32)),
        Tensor(np.clip(right, 0, 1)[None].astype(np.float32)),
    )


def bicubic_refine_input(clean: Tensor, scale: int = 2) -> Tensor:
    """Area-downscale by ``scale`` then bicubic-upsample back to full size."""
    img = clean.data[0].astype(np.float64)
    c, h, w = img.shape
    if h % scale or w % scale:
        raise ShapeError(f"{h}x{w} not divisible by scale {scale}")
    small = img.reshape(c, h // scale, scale, w // scale, scale).mean(axis=(2, 4))
    up = ndimage.zoom(small, (1, scale, scale), order=3, mode="nearest", grid_mode=True)
    return Tensor(np.clip(up, 0, 1)[None].astype(np.float32))


def low_light(clean: Tensor, gamma: float = 2.0, gain: float = 0.6) -> Tensor:
    return Tensor((gain * np.power(clean.data, gamma)).astype(np.float32))


def degrade(clean: Tensor, recipe: dict, seed: int = 0) -> Tensor:
    """Apply a synthetic degradation recipe; pure in (clean, recipe, seed)."""
    kind = recipe["kind"]
    if kind == "gaussian":
        return add_gaussian_noise(clean, float(recipe.get("sigma", 25)), int(recipe.get("seed", 0)) + seed)
    if kind == "dp_blur":
        return defocus_dual_pixel(clean, float(recipe.get("blur", 1.5)), float(recipe.get("shift", 1.0)))
    if kind == "bicubic":
        return bicubic_refine_input(clean, int(recipe.get("scale", 2)))
    if kind == "lowlight":
        return low_light(clean, float(recipe.get("gamma", 2.0)), float(recipe.get("gain", 0.6)))
    raise ValueError(f"unknown degradation {kind!r}")


# ---------------------------------------------------------------------------
# geometry

def _crop(t: Tensor, top: int, left: int, ps: int) -> Tensor:
    return Tensor(t.data[:, :, top : top + ps, left : left + ps], dtype=t.dtype)


def sample_patch(pair: ImagePair, ps: int, rng: np.random.Generator) -> ImagePair:
    """Random ps x ps crop at the same window in both images (reflect-padded
    first if the image is smaller than ps)."""
    _, _, h, w = pair.clean.shape
    if h < ps or w < ps:
        pad = ((0, 0), (0, 0), (0, max(ps - h, 0)), (0, max(ps - w, 0)))
        pair = ImagePair(
            Tensor(np.pad(pair.degraded.data, pad, mode="reflect")),
            Tensor(np.pad(pair.clean.data, pad, mode="reflect")),
            pair.name,
        )
        _, _, h, w = pair.clean.shape
    top = int(rng.integers(0, h - ps + 1))
    left = int(rng.integers(0, w - ps + 1))
    return ImagePair(_crop(pair.degraded, top, left, ps), _crop(pair.clean, top, left, ps), pair.name)


def _flip(t: Tensor, axis: int) -> Tensor:
    return Tensor(np.flip(t.data, axis=axis), dtype=t.dtype)


def flip_augment(pair: ImagePair, rng: np.random.Generator) -> ImagePair:
    """Horizontal and vertical flips, each with probability 1/2, same for both images."""
    deg, clean = pair.degraded, pair.clean
    if rng.random() < 0.5:
        deg, clean = _flip(deg, 3), _flip(clean, 3)
    if rng.random() < 0.5:
        deg, clean = _flip(deg, 2), _flip(clean, 2)
    return ImagePair(deg, clean, pair.name)


def dual_pixel_concat(left: Tensor, right: Tensor) -> Tensor:
    if left.shape != right.shape:
        raise ShapeError(f"view shapes differ: {left.shape} vs {right.shape}")
    return Tensor(np.concatenate([left.data, right.data], axis=1), dtype=left.dtype)


def pad_to_multiple(t: Tensor, m: int) -> tuple[Tensor, tuple[int, int]]:
    """Reflect-pad right/bottom up to the next multiple of m."""
    if m < 1:
        raise ValueError("m must be >= 1")
    h, w = t.shape[2], t.shape[3]
    ph, pw = (-h) % m, (-w) % m
    if not ph and not pw:
        return t, (h, w)
    data = np.pad(t.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return Tensor(data, dtype=t.dtype), (h, w)


def crop_to(t: Tensor, extents: tuple[int, int]) -> Tensor:
    h, w = extents
    return Tensor(t.data[:, :, :h, :w], dtype=t.dtype)


# ---------------------------------------------------------------------------
# procedural clean images

def shapes_image(size: int, rng: np.random.Generator) -> Tensor:
    """Piecewise-smooth synthetic scene: colour gradient, ellipses and
    rectangles, plus a faint periodic texture."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0, 1, 3)[:, None, None]
        cy, cx = rng.uniform(0.1, 0.9, 2)
        ry, rx = rng.uniform(0.08, 0.3, 2)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img = np.where(mask[None], color, img)
    freq = rng.uniform(4, 12)
    img = img + 0.04 * np.sin(2 * np.pi * freq * (xx + 0.5 * yy))[None]
    return Tensor(np.clip(img, 0, 1)[None].astype(np.float32))


def procedural_images(count: int, size: int, seed: int) -> list[Tensor]:
    rng = np.random.default_rng(seed)
    return [shapes_image(size, rng) for _ in range(count)]


def write_procedural_dataset(root: str | Path, count: int, size: int = 64, seed: int = 0) -> Path:
    """Write ``count`` procedural clean images to ``<root>/clean/NNN.png``."""
    clean_dir = Path(root) / "clean"
    clean_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(procedural_images(count, size, seed)):
        save_image(img, clean_dir / f"{i:03d}.png")
    return Path(root)


# ---------------------------------------------------------------------------
# datasets

def _image_files(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def list_pairs(root: str | Path) -> list[ImagePair]:
    """Pair ``clean/<stem>.*`` with ``degraded/<stem>.*`` (or the dual-pixel
    views ``degraded/<stem>_L.*`` + ``degraded/<stem>_R.*``)."""
    root = Path(root)
    degraded = {p.stem: p for p in _image_files(root / "degraded")}
    pairs = []
    for cp in _image_files(root / "clean"):
        clean = load_image(cp)
        if cp.stem in degraded:
            deg = load_image(degraded[cp.stem])
        elif f"{cp.stem}_L" in degraded and f"{cp.stem}_R" in degraded:
            deg = dual_pixel_concat(load_image(degraded[f"{cp.stem}_L"]), load_image(degraded[f"{cp.stem}_R"]))
        else:
            raise UnpairedDataError(f"no degraded counterpart for {cp.name}")
        pairs.append(ImagePair(deg, clean, cp.stem))
    if not pairs:
        raise UnpairedDataError(f"no images under {root / 'clean'}")
    return pairs


class PairedDataset:
    """Training/validation pairs. Synthetic Gaussian noise is redrawn on every
    sample; other synthetic recipes are applied once per image."""

    def __init__(self, train: Sequence[ImagePair], val: Sequence[ImagePair], recipe: dict | None = None):
        if not train:
            raise ValueError("dataset has no training images")
        self.train = list(train)
        self.val = list(val)
        self.recipe = recipe
        self._fresh_noise = recipe is not None and recipe["kind"] == "gaussian"

    def __len__(self) -> int:
        return len(self.train)

    @classmethod
    def synthetic(cls, clean: Sequence[Tensor], recipe: dict, val_count: int, seed: int = 0) -> "PairedDataset":
        clean = list(clean)
        if len(clean) <= val_count:
            raise ValueError(f"need more than {val_count} images to hold out {val_count}")
        train_imgs, val_imgs = clean[:-val_count], clean[-val_count:]
        fresh = recipe["kind"] == "gaussian"
        train = [ImagePair(img if fresh else degrade(img, recipe, seed + i), img, f"train{i:03d}")
                 for i, img in enumerate(train_imgs)]
        # validation noise uses seeds disjoint from anything the sampler draws
        val = [ImagePair(degrade(img, recipe, 10_000_019 + seed + i), img, f"val{i:03d}")
               for i, img in enumerate(val_imgs)]
        return cls(train, val, recipe)

    @classmethod
    def from_spec(cls, spec: DatasetSpec) -> "PairedDataset":
        if spec.root is not None and spec.synth is None:
            pairs = list_pairs(spec.root)
            if len(pairs) <= spec.val_count:
                raise ValueError("not enough pairs for the validation split")
            return cls(pairs[: -spec.val_count], pairs[-spec.val_count :])
        if spec.root is not None:
            clean = [load_image(p) for p in _image_files(Path(spec.root) / "clean")]
        else:
            clean = procedural_images(spec.procedural, spec.image_size, spec.seed)
        return cls.synthetic(clean, spec.synth, spec.val_count, spec.seed)

    def draw(self, index: int, ps: int, rng: np.random.Generator, flips: bool = True) -> ImagePair:
        pair = self.train[index]
        patch = sample_patch(pair, ps, rng)
        if self._fresh_noise:
            noisy = degrade(patch.clean, self.recipe, int(rng.integers(0, 2**31 - 1)))
            patch = ImagePair(noisy, patch.clean, patch.name)
        return flip_augment(patch, rng) if flips else patch
