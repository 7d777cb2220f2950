"""Two-view augmentation with geometry shared between RGB and depth.

Geometric transforms (crop, flip, resize) are applied identically to the RGB
image and its depth map; photometric transforms touch RGB only. Every feature
cell of an augmented view can be mapped back to source-image coordinates for
spatial-distance thresholding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .data import RgbdSample


@dataclass
class ViewGeometry:
    crop_box: tuple[int, int, int, int]  # (x, y, w, h) in source pixels
    hflip: bool
    out_resolution: tuple[int, int]      # (H_out, W_out)


@dataclass
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.3, 1.0)   # crop area as fraction of source
    crop_ratio: tuple[float, float] = (0.75, 1.333)
    hflip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    min_crop: int = 8
    max_retries: int = 20
    feature_grid: tuple[int, int] = (7, 7)  # used only for the overlap criterion


@dataclass
class ViewPair:
    view1_rgb: np.ndarray
    view2_rgb: np.ndarray
    view1_depth: np.ndarray
    view2_depth: np.ndarray
    geom1: ViewGeometry
    geom2: ViewGeometry


def _intersection_area(a: ViewGeometry, b: ViewGeometry) -> float:
    ax, ay, aw, ah = a.crop_box
    bx, by, bw, bh = b.crop_box
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    return iw * ih


def _sample_crop(source_hw, cfg: AugmentConfig, rng: np.random.Generator):
    h, w = source_hw
    area = h * w
    for _ in range(10):
        target_area = area * rng.uniform(*cfg.crop_scale)
        log_ratio = np.log(cfg.crop_ratio)
        ratio = np.exp(rng.uniform(log_ratio[0], log_ratio[1]))
        cw = int(round(np.sqrt(target_area * ratio)))
        ch = int(round(np.sqrt(target_area / ratio)))
        if cfg.min_crop <= cw <= w and cfg.min_crop <= ch <= h:
            x = int(rng.integers(0, w - cw + 1))
            y = int(rng.integers(0, h - ch + 1))
            return x, y, cw, ch
    # degenerate fallback: largest centered crop
    cw, ch = min(w, h), min(w, h)
    return (w - cw) // 2, (h - ch) // 2, cw, ch


def sample_view_geometry(
    source_hw: tuple[int, int],
    cfg: AugmentConfig,
    rng: np.random.Generator,
    out_resolution: tuple[int, int] = (112, 112),
) -> tuple[ViewGeometry, ViewGeometry]:
    """Draw two random-resized-crop geometries whose boxes intersect.

    Retries up to ``cfg.max_retries`` times to get an intersection of at least
    one feature-cell footprint, then falls back to geom2 := geom1.
    """
    gh, gw = cfg.feature_grid

    def make_geom():
        box = _sample_crop(source_hw, cfg, rng)
        return ViewGeometry(
            crop_box=box,
            hflip=bool(rng.random() < cfg.hflip_prob),
            out_resolution=out_resolution,
        )

    geom1 = make_geom()
    for _ in range(cfg.max_retries):
        geom2 = make_geom()
        cell_area = min(
            geom1.crop_box[2] * geom1.crop_box[3],
            geom2.crop_box[2] * geom2.crop_box[3],
        ) / (gh * gw)
        if _intersection_area(geom1, geom2) >= cell_area:
            return geom1, geom2
    return geom1, ViewGeometry(
        crop_box=geom1.crop_box, hflip=geom1.hflip, out_resolution=out_resolution
    )


def apply_geometry(image: np.ndarray, geom: ViewGeometry, interp: str = "bilinear") -> np.ndarray:
    """Crop, optionally flip, and resize one image (RGB or depth).

    ``interp``: "bilinear" for RGB; "depth" selects area averaging when
    downscaling and nearest otherwise, so depth never blurs across object
    boundaries; "nearest" forces nearest.
    """
    x, y, w, h = geom.crop_box
    sh, sw = image.shape[:2]
    if x < 0 or y < 0 or x + w > sw or y + h > sh or w <= 0 or h <= 0:
        raise ValueError(f"crop box {geom.crop_box} outside source {sh}x{sw}")
    crop = image[y : y + h, x : x + w]
    if geom.hflip:
        crop = crop[:, ::-1]
    out_h, out_w = geom.out_resolution
    if (out_h, out_w) == (h, w):
        return np.ascontiguousarray(crop)
    if interp == "bilinear":
        flag = cv2.INTER_LINEAR
    elif interp == "nearest":
        flag = cv2.INTER_NEAREST
    elif interp == "depth":
        flag = cv2.INTER_AREA if (out_h <= h and out_w <= w) else cv2.INTER_NEAREST
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    out = cv2.resize(np.ascontiguousarray(crop), (out_w, out_h), interpolation=flag)
    return out


def _apply_jitter(rgb: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.jitter_strength
    brightness = rng.uniform(1 - s, 1 + s)
    contrast = rng.uniform(1 - s, 1 + s)
    saturation = rng.uniform(1 - s, 1 + s)
    out = rgb * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out.mean(axis=2, keepdims=True)
    out = (out - gray) * saturation + gray
    return out


def photometric_augment(rgb: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Color jitter / grayscale / blur on RGB only; output clipped to [0,1]."""
    out = rgb.astype(np.float32)
    if rng.random() < cfg.jitter_prob:
        out = _apply_jitter(out, cfg, rng)
    if rng.random() < cfg.grayscale_prob:
        gray = out @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        out = np.repeat(gray[:, :, None], 3, axis=2)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma)
        out = cv2.GaussianBlur(out, (0, 0), sigmaX=sigma)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def feature_cell_coords(geom: ViewGeometry, grid_hw: tuple[int, int]) -> np.ndarray:
    """Source-image (x, y) coordinates of each feature cell's center.

    Cell (r, c) maps to the center of the matching sub-rectangle of the crop
    box; a horizontal flip reflects x about the crop's vertical axis.
    """
    gh, gw = grid_hw
    if gh < 1 or gw < 1:
        raise ValueError(f"grid dims must be >= 1, got {grid_hw}")
    x, y, w, h = geom.crop_box
    cols = x + (np.arange(gw) + 0.5) * w / gw
    rows = y + (np.arange(gh) + 0.5) * h / gh
    if geom.hflip:
        cols = (2 * x + w) - cols
    coords = np.empty((gh, gw, 2), dtype=np.float64)
    coords[:, :, 0] = cols[None, :]
    coords[:, :, 1] = rows[:, None]
    return coords


def make_view_pair(
    sample: RgbdSample,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    out_resolution: tuple[int, int] = (112, 112),
) -> ViewPair:
    """Full two-view pipeline: shared geometry for RGB+depth, photometrics on RGB."""
    geom1, geom2 = sample_view_geometry(sample.rgb.shape[:2], cfg, rng, out_resolution)
    v1_rgb = photometric_augment(apply_geometry(sample.rgb, geom1, "bilinear"), cfg, rng)
    v2_rgb = photometric_augment(apply_geometry(sample.rgb, geom2, "bilinear"), cfg, rng)
    v1_depth = apply_geometry(sample.depth, geom1, "depth")
    v2_depth = apply_geometry(sample.depth, geom2, "depth")
    return ViewPair(
        view1_rgb=v1_rgb,
        view2_rgb=v2_rgb,
        view1_depth=v1_depth,
        view2_depth=v2_depth,
        geom1=geom1,
        geom2=geom2,
    )
