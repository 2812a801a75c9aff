"""Hounsfield-unit windowing: turn one HU slice into a 3-channel [0,1] image.

Each channel applies one linear intensity window (level/width) and the three
windowed copies are stacked channel-first, so a single CT slice becomes an
RGB-like image a 2D backbone can consume. Defaults are the standard brain,
subdural, and bony head-CT windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class WindowSpec:
    """One linear intensity window, defined by its center (level) and width in HU."""

    level: float
    width: float

    def __post_init__(self):
        if not np.isfinite(self.level) or not np.isfinite(self.width):
            raise ConfigError(f"window level/width must be finite, got ({self.level}, {self.width})")
        if self.width <= 0:
            raise ConfigError(f"window width must be > 0, got {self.width}")

    @property
    def low(self) -> float:
        return self.level - self.width / 2.0

    @property
    def high(self) -> float:
        return self.level + self.width / 2.0


BRAIN_WINDOW = WindowSpec(level=40.0, width=80.0)
SUBDURAL_WINDOW = WindowSpec(level=75.0, width=215.0)
BONY_WINDOW = WindowSpec(level=600.0, width=2800.0)


@dataclass(frozen=True)
class WindowTriple:
    """Exactly three windows, one per output channel."""

    channels: tuple[WindowSpec, WindowSpec, WindowSpec]

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ConfigError(f"expected exactly 3 windows, got {len(self.channels)}")

    @classmethod
    def default(cls) -> "WindowTriple":
        return cls(channels=(BRAIN_WINDOW, SUBDURAL_WINDOW, BONY_WINDOW))

    @classmethod
    def from_pairs(cls, pairs) -> "WindowTriple":
        """Build from three (level, width) pairs, e.g. straight out of a config file."""
        if len(pairs) != 3:
            raise ConfigError(f"expected 3 (level, width) pairs, got {len(pairs)}")
        return cls(channels=tuple(WindowSpec(float(l), float(w)) for l, w in pairs))


def apply_window(hu: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Map HU values into [0,1] through one linear window.

    hu at ``level - width/2`` maps to 0, ``level + width/2`` maps to 1,
    values outside are clamped. Monotone non-decreasing in hu.
    """
    hu = np.asarray(hu, dtype=np.float64)
    out = (hu - spec.low) / spec.width
    return np.clip(out, 0.0, 1.0)


def stack_windows(hu: np.ndarray, triple: WindowTriple | None = None) -> np.ndarray:
    """Apply all three windows to one HU slice and stack them as a (3, H, W) image."""
    triple = triple or WindowTriple.default()
    hu = np.asarray(hu)
    if hu.ndim != 2:
        raise ValueError(f"expected a 2D HU slice, got shape {hu.shape}")
    return np.stack([apply_window(hu, spec) for spec in triple.channels], axis=0)


def normalize_channels(image: np.ndarray, mean, std) -> np.ndarray:
    """Per-channel (x - mean) / std on a (3, H, W) image, e.g. to match pretrained backbone stats."""
    mean = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(3, 1, 1)
    if np.any(std == 0):
        raise ConfigError("channel_norm std must be non-zero")
    return (image - mean) / std


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Optional export step: quantize a [0,1] windowed image to 8-bit."""
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
