"""Training-time stochastic transforms for windowed slice images.

Geometric transforms (crop/resize, flips, rotation, grid distortion) are
sampled once per scan and applied identically to every slice so adjacent
slices stay anatomically aligned for the sequence head; Gaussian noise is
drawn per slice. CutMix pairs slices across the batch at the same sequence
position with a single mixing coefficient and box per batch.

Everything is driven by an explicit numpy Generator, so a fixed seed gives a
bit-identical transform sequence. Transforms that would be identity (zero
angle, full-frame crop, zero strength/sigma) are skipped outright, which
keeps the fully-disabled configuration bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ConfigError

DISTORTION_GRID = 5  # control points per axis


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.8, 1.0)  # fraction of area
    rotation_range_deg: tuple[float, float] = (0.0, 30.0)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    distortion_prob: float = 0.5
    distortion_strength: float = 0.1
    noise_sigma: float = 0.01  # in [0,1] intensity units
    cutmix_alpha: float = 1.0
    cutmix_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("hflip_prob", "vflip_prob", "distortion_prob", "cutmix_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {p}")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        rlo, rhi = self.rotation_range_deg
        if not 0.0 <= rlo <= rhi:
            raise ConfigError(f"rotation_range_deg must satisfy 0 <= lo <= hi, got {self.rotation_range_deg}")
        if self.cutmix_alpha <= 0:
            raise ConfigError(f"cutmix_alpha must be > 0, got {self.cutmix_alpha}")
        if self.distortion_strength < 0 or self.noise_sigma < 0:
            raise ConfigError("distortion_strength and noise_sigma must be >= 0")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        """Identity configuration: every transform off."""
        return cls(
            crop_scale_range=(1.0, 1.0),
            rotation_range_deg=(0.0, 0.0),
            hflip_prob=0.0,
            vflip_prob=0.0,
            distortion_prob=0.0,
            distortion_strength=0.0,
            noise_sigma=0.0,
            cutmix_prob=0.0,
        )


@dataclass
class GeometricParams:
    """One concrete draw of the per-scan geometric transforms."""

    crop_box: tuple[int, int, int, int] | None  # (y0, x0, h, w); None = full frame
    hflip: bool
    vflip: bool
    angle_deg: float
    distortion_offsets: np.ndarray | None  # (2, G, G) control-point offsets in pixels


def sample_geometric_params(cfg: AugmentConfig, height: int, width: int, rng: np.random.Generator) -> GeometricParams:
    """Draw one set of geometric transform parameters for a (height, width) scan."""
    scale = rng.uniform(cfg.crop_scale_range[0], cfg.crop_scale_range[1])
    side = math.sqrt(scale)
    crop_h = max(1, int(round(height * side)))
    crop_w = max(1, int(round(width * side)))
    y0 = int(rng.integers(0, height - crop_h + 1))
    x0 = int(rng.integers(0, width - crop_w + 1))
    crop_box = None if (crop_h == height and crop_w == width) else (y0, x0, crop_h, crop_w)

    hflip = rng.random() < cfg.hflip_prob
    vflip = rng.random() < cfg.vflip_prob

    angle = rng.uniform(cfg.rotation_range_deg[0], cfg.rotation_range_deg[1])
    if rng.random() < 0.5:
        angle = -angle

    offsets = None
    if rng.random() < cfg.distortion_prob and cfg.distortion_strength > 0:
        cell_h = height / (DISTORTION_GRID - 1)
        cell_w = width / (DISTORTION_GRID - 1)
        raw = rng.uniform(-cfg.distortion_strength, cfg.distortion_strength, size=(2, DISTORTION_GRID, DISTORTION_GRID))
        offsets = raw * np.array([cell_h, cell_w], dtype=np.float64).reshape(2, 1, 1)

    return GeometricParams(
        crop_box=crop_box,
        hflip=hflip,
        vflip=vflip,
        angle_deg=float(angle),
        distortion_offsets=offsets,
    )


def _to_hwc(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(image, 0, -1), dtype=np.float32)


def _to_chw(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(image, -1, 0))


def apply_geometric(image: np.ndarray, params: GeometricParams) -> np.ndarray:
    """Apply one parameter draw to a (3, H, W) image. Identity draws return the input untouched."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    out = image

    if params.crop_box is not None:
        y0, x0, ch, cw = params.crop_box
        hwc = _to_hwc(out[:, y0 : y0 + ch, x0 : x0 + cw])
        out = _to_chw(cv2.resize(hwc, (w, h), interpolation=cv2.INTER_LINEAR))

    if params.hflip:
        out = np.flip(out, axis=2)
    if params.vflip:
        out = np.flip(out, axis=1)

    if params.angle_deg != 0.0:
        matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), params.angle_deg, 1.0)
        hwc = cv2.warpAffine(
            _to_hwc(out), matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101
        )
        out = _to_chw(hwc)

    if params.distortion_offsets is not None:
        off_y = cv2.resize(params.distortion_offsets[0].astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
        off_x = cv2.resize(params.distortion_offsets[1].astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
        base_y, base_x = np.meshgrid(
            np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32), indexing="ij"
        )
        hwc = cv2.remap(
            _to_hwc(out),
            base_x + off_x,
            base_y + off_y,
            interpolation=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_REFLECT_101,
        )
        out = _to_chw(hwc)

    return out


def add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma <= 0:
        return image
    return (image + rng.normal(0.0, sigma, size=image.shape)).astype(image.dtype, copy=False)


def augment_slice(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One stochastic transform draw applied to a single (3, H, W) image."""
    params = sample_geometric_params(cfg, image.shape[1], image.shape[2], rng)
    return add_noise(apply_geometric(image, params), cfg.noise_sigma, rng)


def augment_scan(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Transform a whole scan (S, 3, H, W) with a single geometric draw shared by all slices.

    Noise stays per-slice; geometry is shared so neighbouring slices remain aligned.
    """
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (S, 3, H, W) scan images, got shape {images.shape}")
    params = sample_geometric_params(cfg, images.shape[2], images.shape[3], rng)
    out = np.stack([apply_geometric(img, params) for img in images], axis=0)
    return add_noise(out, cfg.noise_sigma, rng)


# ---------------------------------------------------------------------------
# CutMix


@dataclass
class CutMixResult:
    mixed_images: np.ndarray
    mixed_labels: np.ndarray
    lambda_adjusted: float
    box: tuple[int, int, int, int]  # (x1, y1, x2, y2)


def sample_cutmix_box(alpha: float, height: int, width: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Draw lam0 ~ Beta(alpha, alpha) and a centered box of area fraction (1 - lam0), clipped to frame."""
    lam0 = rng.beta(alpha, alpha)
    cut_ratio = math.sqrt(max(0.0, 1.0 - lam0))
    cut_w = int(round(width * cut_ratio))
    cut_h = int(round(height * cut_ratio))
    cx = int(rng.integers(0, width))
    cy = int(rng.integers(0, height))
    x1 = int(np.clip(cx - cut_w // 2, 0, width))
    y1 = int(np.clip(cy - cut_h // 2, 0, height))
    x2 = int(np.clip(cx + cut_w // 2, 0, width))
    y2 = int(np.clip(cy + cut_h // 2, 0, height))
    return x1, y1, x2, y2


def box_lambda(box: tuple[int, int, int, int], height: int, width: int) -> float:
    """Mixing coefficient recomputed from the clipped box: 1 - box_area / frame_area."""
    x1, y1, x2, y2 = box
    return 1.0 - (x2 - x1) * (y2 - y1) / (height * width)


def apply_cutmix(
    images: np.ndarray,
    labels: np.ndarray,
    perm: np.ndarray,
    box: tuple[int, int, int, int],
) -> CutMixResult:
    """Deterministic CutMix core: paste the partner's box region and mix labels by area."""
    x1, y1, x2, y2 = box
    lam = box_lambda(box, images.shape[-2], images.shape[-1])
    mixed = images.copy()
    mixed[..., y1:y2, x1:x2] = images[perm][..., y1:y2, x1:x2]
    mixed_labels = lam * labels + (1.0 - lam) * labels[perm]
    return CutMixResult(mixed_images=mixed, mixed_labels=mixed_labels, lambda_adjusted=lam, box=box)


def cutmix_batch(
    images: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
) -> CutMixResult:
    """CutMix over a batch of slices (B, 3, H, W) with labels (B, 6).

    A batch of fewer than 2 samples has no partner to mix with, so it comes
    back unchanged with lambda_adjusted = 1.
    """
    if alpha <= 0:
        raise ConfigError(f"cutmix alpha must be > 0, got {alpha}")
    if images.shape[0] < 2:
        return CutMixResult(
            mixed_images=images, mixed_labels=labels, lambda_adjusted=1.0, box=(0, 0, 0, 0)
        )
    box = sample_cutmix_box(alpha, images.shape[-2], images.shape[-1], rng)
    perm = rng.permutation(images.shape[0])
    return apply_cutmix(images, labels, perm, box)


def cutmix_scan_batch(
    images: np.ndarray,
    labels: np.ndarray,
    valid: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, float]:
    """CutMix across a padded scan batch (B, S, 3, H, W), pairing same sequence positions.

    One coefficient and box per batch. A position is mixed only when it is
    valid in both partners; positions whose partner is padding stay untouched
    so no real slice ever absorbs zero-filled padding.
    """
    if images.shape[0] < 2:
        return images, labels, 1.0
    box = sample_cutmix_box(alpha, images.shape[-2], images.shape[-1], rng)
    perm = rng.permutation(images.shape[0])
    x1, y1, x2, y2 = box
    lam = box_lambda(box, images.shape[-2], images.shape[-1])
    mixed = images.copy()
    mixed_labels = labels.copy()
    both = valid & valid[perm]
    mixed[both, :, y1:y2, x1:x2] = images[perm][both, :, y1:y2, x1:x2]
    mixed_labels[both] = lam * labels[both] + (1.0 - lam) * labels[perm][both]
    return mixed, mixed_labels, lam
