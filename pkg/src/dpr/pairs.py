"""Positive/negative pair selection over the two views' feature grids.

A cell pair (i, j) is positive iff its source-image distance is within the
spatial threshold AND its pooled depth difference is within the depth
threshold; the combined mask is the elementwise product of the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .view_aug import ViewGeometry, feature_cell_coords

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


@dataclass
class PairMask:
    """Per-threshold binary masks over (view-1 cells x view-2 cells).

    ``valid`` marks pairs where both cells carry valid depth and the view-1
    cell lies inside view-2's crop region; only valid pairs enter the positive
    and negative sets.
    """

    a_image: np.ndarray   # N1 x N2 uint8
    a_depth: np.ndarray   # N1 x N2 uint8
    a: np.ndarray         # N1 x N2 uint8, a_image * a_depth
    valid: np.ndarray     # N1 x N2 bool
    threshold_pair: tuple[float, float]
    # per-cell ingredients of `valid`, kept so transposition stays exact
    depth_valid_1: np.ndarray | None = None  # N1 bool
    depth_valid_2: np.ndarray | None = None  # N2 bool
    in_other_1: np.ndarray | None = None     # N1 bool: view-1 cell inside view-2 crop
    in_other_2: np.ndarray | None = None     # N2 bool: view-2 cell inside view-1 crop

    def transposed(self) -> "PairMask":
        """The same mask seen from view 2, for the mirrored loss term."""
        if self.depth_valid_1 is not None:
            valid_t = (
                self.depth_valid_2[:, None]
                & self.depth_valid_1[None, :]
                & self.in_other_2[:, None]
            )
        else:
            valid_t = self.valid.T
        return PairMask(
            a_image=self.a_image.T,
            a_depth=self.a_depth.T,
            a=self.a.T,
            valid=valid_t,
            threshold_pair=self.threshold_pair,
            depth_valid_1=self.depth_valid_2,
            depth_valid_2=self.depth_valid_1,
            in_other_1=self.in_other_2,
            in_other_2=self.in_other_1,
        )

    def positive_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero((self.a[i] == 1) & self.valid[i]) for i in range(self.a.shape[0])]

    def negative_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero((self.a[i] == 0) & self.valid[i]) for i in range(self.a.shape[0])]


def coord_distance_matrix(
    coords1: np.ndarray, coords2: np.ndarray, source_hw: tuple[int, int]
) -> np.ndarray:
    """Pairwise euclidean distance in source pixels, normalized by the diagonal."""
    h, w = source_hw
    diff = coords1[:, None, :] - coords2[None, :, :]
    return np.sqrt((diff**2).sum(axis=2)) / np.sqrt(h**2 + w**2)


def image_mask(dist: np.ndarray, threshold: float) -> np.ndarray:
    """1 where dist <= threshold (boundary inclusive)."""
    if threshold < 0:
        raise ValueError(f"spatial threshold must be >= 0, got {threshold}")
    return (dist <= threshold).astype(np.uint8)


def depth_grid(depth_crop: np.ndarray, grid_hw: tuple[int, int]) -> np.ndarray:
    """Area-average pooling of a depth crop onto the feature grid.

    Exact fractional-overlap pooling, so arbitrary crop/grid size ratios give
    the true per-cell mean.
    """
    gh, gw = grid_hw
    h, w = depth_crop.shape
    if gh > h or gw > w:
        raise ValueError(f"grid {grid_hw} larger than crop {depth_crop.shape}")
    wy = _overlap_weights(h, gh)
    wx = _overlap_weights(w, gw)
    return (wy @ depth_crop.astype(np.float64) @ wx.T).astype(np.float32)


def _overlap_weights(n: int, g: int) -> np.ndarray:
    """g x n matrix of normalized interval overlaps between g cells and n pixels."""
    weights = np.zeros((g, n), dtype=np.float64)
    cell = n / g
    for k in range(g):
        lo, hi = k * cell, (k + 1) * cell
        px = np.arange(n)
        overlap = np.minimum(hi, px + 1) - np.maximum(lo, px)
        weights[k] = np.clip(overlap, 0.0, 1.0) / cell
    return weights


def depth_mask(d1: np.ndarray, d2: np.ndarray, threshold: float) -> np.ndarray:
    """1 where |d1[i] - d2[j]| <= threshold (boundary inclusive)."""
    if threshold < 0:
        raise ValueError(f"depth threshold must be >= 0, got {threshold}")
    diff = np.abs(d1[:, None] - d2[None, :])
    return (diff <= threshold).astype(np.uint8)


def combine_masks(
    a_image: np.ndarray,
    a_depth: np.ndarray,
    valid: np.ndarray,
    threshold_pair: tuple[float, float] = (0.0, 0.0),
    **per_cell,
) -> PairMask:
    if not (a_image.shape == a_depth.shape == valid.shape):
        raise ValueError(
            f"shape mismatch: {a_image.shape}, {a_depth.shape}, {valid.shape}"
        )
    return PairMask(
        a_image=a_image.astype(np.uint8),
        a_depth=a_depth.astype(np.uint8),
        a=(a_image * a_depth).astype(np.uint8),
        valid=valid.astype(bool),
        threshold_pair=threshold_pair,
        **per_cell,
    )


def _inside_box(coords: np.ndarray, crop_box) -> np.ndarray:
    x, y, w, h = crop_box
    cx, cy = coords[:, 0], coords[:, 1]
    return (cx >= x) & (cx <= x + w) & (cy >= y) & (cy <= y + h)


def cell_depth_validity(depth_crop: np.ndarray, grid_hw: tuple[int, int]) -> np.ndarray:
    """A cell is depth-valid when most of its area carries nonzero (non-hole) depth."""
    frac = depth_grid((depth_crop > 0).astype(np.float64), grid_hw)
    return frac >= 0.5


def threshold_pairs(
    thresholds=DEFAULT_THRESHOLDS, cross_product: bool = False
) -> list[tuple[float, float]]:
    if cross_product:
        return [(t, tp) for t in thresholds for tp in thresholds]
    return [(t, t) for t in thresholds]


def build_pair_masks(
    geom1: ViewGeometry,
    geom2: ViewGeometry,
    depth1_crop: np.ndarray,
    depth2_crop: np.ndarray,
    grid_hw: tuple[int, int],
    source_hw: tuple[int, int],
    thresholds=DEFAULT_THRESHOLDS,
    cross_product: bool = False,
    distance_norm: str = "source_diagonal",
) -> list[PairMask]:
    """Masks for every threshold pair, flattened to (grid cells x grid cells).

    ``distance_norm`` selects the denominator of the spatial distance:
    "source_diagonal" divides by the source-image diagonal (default);
    "grid_diagonal" divides by the mean feature-bin diagonal of the two crops,
    the convention where the threshold counts bins rather than image fractions.
    """
    gh, gw = grid_hw
    coords1 = feature_cell_coords(geom1, grid_hw).reshape(-1, 2)
    coords2 = feature_cell_coords(geom2, grid_hw).reshape(-1, 2)
    if distance_norm == "source_diagonal":
        dist = coord_distance_matrix(coords1, coords2, source_hw)
    elif distance_norm == "grid_diagonal":
        diag1 = np.hypot(geom1.crop_box[2] / gw, geom1.crop_box[3] / gh)
        diag2 = np.hypot(geom2.crop_box[2] / gw, geom2.crop_box[3] / gh)
        diff = coords1[:, None, :] - coords2[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2)) / ((diag1 + diag2) / 2)
    else:
        raise ValueError(f"unknown distance_norm {distance_norm!r}")
    d1 = depth_grid(depth1_crop, grid_hw).reshape(-1)
    d2 = depth_grid(depth2_crop, grid_hw).reshape(-1)

    dv1 = cell_depth_validity(depth1_crop, grid_hw).reshape(-1)
    dv2 = cell_depth_validity(depth2_crop, grid_hw).reshape(-1)
    in2 = _inside_box(coords1, geom2.crop_box)
    in1 = _inside_box(coords2, geom1.crop_box)
    valid = dv1[:, None] & dv2[None, :] & in2[:, None]

    masks = []
    for t, tp in threshold_pairs(thresholds, cross_product):
        masks.append(
            combine_masks(
                image_mask(dist, t),
                depth_mask(d1, d2, tp),
                valid,
                threshold_pair=(t, tp),
                depth_valid_1=dv1,
                depth_valid_2=dv2,
                in_other_1=in2,
                in_other_2=in1,
            )
        )
    return masks
