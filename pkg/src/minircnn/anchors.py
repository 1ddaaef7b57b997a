"""Translation-invariant anchor pyramid over a feature grid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AnchorConfig:
    scales: tuple[float, ...] = (16.0, 32.0, 64.0)  # side lengths, px
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)     # width : height
    stride: int = 8

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ValueError("ratios must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def k(self) -> int:
        return len(self.scales) * len(self.ratios)


PAPER_CONFIG = AnchorConfig(scales=(128.0, 256.0, 512.0), ratios=(0.5, 1.0, 2.0),
                            stride=16)


@dataclass
class AnchorSet:
    boxes: np.ndarray           # (W*H*k, 4), row-major grid, anchor fastest
    feature_w: int
    feature_h: int
    k: int
    inside: np.ndarray | None = field(default=None)  # bool mask, set lazily

    def __len__(self) -> int:
        return self.boxes.shape[0]


def base_anchors(cfg: AnchorConfig) -> np.ndarray:
    """k boxes centered at the origin; scales outer, ratios inner.

    Scale s and ratio r give width s*sqrt(r), height s/sqrt(r), so area
    stays s^2 for every ratio.
    """
    out = np.empty((cfg.k, 4), dtype=np.float64)
    i = 0
    for s in cfg.scales:
        for r in cfg.ratios:
            w = s * np.sqrt(r)
            h = s / np.sqrt(r)
            out[i] = (-w / 2, -h / 2, w / 2, h / 2)
            i += 1
    return out


def grid_anchors(cfg: AnchorConfig, feature_w: int, feature_h: int) -> AnchorSet:
    """Replicate base anchors at every cell center ((j+0.5)*stride, (i+0.5)*stride)."""
    if feature_w < 1 or feature_h < 1:
        raise ValueError("feature grid must be at least 1x1")
    base = base_anchors(cfg)
    cx = (np.arange(feature_w) + 0.5) * cfg.stride
    cy = (np.arange(feature_h) + 0.5) * cfg.stride
    shift = np.zeros((feature_h, feature_w, 4), dtype=np.float64)
    shift[:, :, 0] = shift[:, :, 2] = cx[None, :]
    shift[:, :, 1] = shift[:, :, 3] = cy[:, None]
    boxes = (shift[:, :, None, :] + base[None, None, :, :]).reshape(-1, 4)
    return AnchorSet(boxes=boxes, feature_w=feature_w, feature_h=feature_h, k=cfg.k)


def inside_mask(aset: AnchorSet, image_w: float, image_h: float) -> np.ndarray:
    """True iff the anchor lies entirely within the half-open [0, w) x [0, h).

    The image domain is half-open like the box convention itself: an anchor
    whose right/bottom edge coincides with the image edge crosses out of it.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    b = aset.boxes
    mask = (b[:, 0] >= 0) & (b[:, 1] >= 0) & (b[:, 2] < image_w) & (b[:, 3] < image_h)
    aset.inside = mask
    return mask
