import numpy as np
import pytest

from dpr.pairs import (
    build_pair_masks,
    cell_depth_validity,
    combine_masks,
    coord_distance_matrix,
    depth_grid,
    depth_mask,
    image_mask,
    threshold_pairs,
)
from dpr.view_aug import AugmentConfig, ViewGeometry, make_view_pair, sample_view_geometry
from oracles import area_pool_oracle, masks_oracle


class TestCoordDistance:
    def test_identical_coordinate_is_zero(self):
        c = np.array([[10.0, 20.0]])
        assert coord_distance_matrix(c, c, (100, 100))[0, 0] == 0.0

    def test_opposite_corners_normalize_to_one(self):
        a = np.array([[0.0, 0.0]])
        b = np.array([[100.0, 100.0]])
        assert coord_distance_matrix(a, b, (100, 100))[0, 0] == pytest.approx(1.0)

    def test_hand_value(self):
        a = np.array([[0.0, 0.0]])
        b = np.array([[30.0, 40.0]])
        expected = 50.0 / np.sqrt(20000.0)
        assert coord_distance_matrix(a, b, (100, 100))[0, 0] == pytest.approx(expected)

    def test_symmetric_under_swap(self, rng):
        c1 = rng.random((5, 2)) * 50
        c2 = rng.random((7, 2)) * 50
        d = coord_distance_matrix(c1, c2, (64, 64))
        np.testing.assert_allclose(d, coord_distance_matrix(c2, c1, (64, 64)).T)


class TestImageMask:
    def test_direct_thresholding(self):
        dist = np.array([[0.0, 0.5], [0.29, 0.31]])
        np.testing.assert_array_equal(image_mask(dist, 0.3), [[1, 0], [1, 0]])

    def test_threshold_one_gives_all_ones(self, rng):
        dist = rng.random((4, 4))
        assert image_mask(dist, 1.0).all()

    def test_boundary_is_inclusive(self):
        assert image_mask(np.array([[0.3]]), 0.3)[0, 0] == 1

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            image_mask(np.zeros((2, 2)), -0.1)


class TestDepthGrid:
    def test_constant_crop(self):
        out = depth_grid(np.full((14, 14), 0.5), (7, 7))
        np.testing.assert_allclose(out, 0.5)

    def test_two_by_two_average(self):
        crop = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert depth_grid(crop, (1, 1))[0, 0] == pytest.approx(0.5)

    def test_checkerboard(self):
        crop = np.indices((4, 4)).sum(axis=0) % 2
        np.testing.assert_allclose(depth_grid(crop.astype(float), (2, 2)), 0.5)

    def test_matches_bruteforce_oracle_uneven_sizes(self, rng):
        for h, w, gh, gw in [(10, 10, 3, 3), (11, 7, 4, 2), (9, 13, 7, 5)]:
            crop = rng.random((h, w))
            np.testing.assert_allclose(
                depth_grid(crop, (gh, gw)), area_pool_oracle(crop, (gh, gw)), atol=1e-10
            )

    def test_grid_larger_than_crop_rejected(self):
        with pytest.raises(ValueError):
            depth_grid(np.zeros((4, 4)), (5, 5))


class TestDepthMask:
    def test_difference_above_threshold(self):
        out = depth_mask(np.array([0.2]), np.array([0.9]), 0.5)
        assert out[0, 0] == 0

    def test_equal_depths_always_positive(self):
        out = depth_mask(np.array([0.4]), np.array([0.4]), 0.0)
        assert out[0, 0] == 1

    def test_boundary_is_inclusive(self):
        out = depth_mask(np.array([0.2]), np.array([0.5]), 0.3)
        assert out[0, 0] == 1

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            depth_mask(np.zeros(2), np.zeros(2), -1.0)


class TestCombineMasks:
    def test_elementwise_product(self):
        a_img = np.array([[1]], np.uint8)
        a_dep = np.array([[0]], np.uint8)
        m = combine_masks(a_img, a_dep, np.ones((1, 1), bool))
        assert m.a[0, 0] == 0

    def test_all_ones_has_no_negatives(self):
        ones = np.ones((3, 3), np.uint8)
        m = combine_masks(ones, ones, np.ones((3, 3), bool))
        assert m.a.all()
        assert all(len(s) == 0 for s in m.negative_sets())

    def test_random_matches_double_loop(self, rng):
        a_img = rng.integers(0, 2, (16, 16)).astype(np.uint8)
        a_dep = rng.integers(0, 2, (16, 16)).astype(np.uint8)
        m = combine_masks(a_img, a_dep, np.ones((16, 16), bool))
        ref = np.zeros((16, 16), np.uint8)
        for i in range(16):
            for j in range(16):
                ref[i, j] = a_img[i, j] * a_dep[i, j]
        np.testing.assert_array_equal(m.a, ref)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            combine_masks(np.ones((2, 2)), np.ones((2, 3)), np.ones((2, 2), bool))


class TestThresholdPairing:
    def test_paired_by_default(self):
        assert threshold_pairs((0.3, 0.5, 0.7)) == [(0.3, 0.3), (0.5, 0.5), (0.7, 0.7)]

    def test_cross_product_flag(self):
        assert len(threshold_pairs((0.3, 0.5, 0.7), cross_product=True)) == 9


def _random_mask_instance(scene, rng, grid=(7, 7)):
    cfg = AugmentConfig(jitter_prob=0, grayscale_prob=0, blur_prob=0)
    pair = make_view_pair(scene, cfg, rng, (56, 56))
    masks = build_pair_masks(
        pair.geom1, pair.geom2, pair.view1_depth, pair.view2_depth,
        grid, scene.rgb.shape[:2],
    )
    return pair, masks


class TestMaskInvariants:
    def test_positive_negative_sets_partition_valid(self, scene, rng):
        _, masks = _random_mask_instance(scene, rng)
        for m in masks:
            pos, neg = m.positive_sets(), m.negative_sets()
            for i in range(m.a.shape[0]):
                valid_cols = set(np.flatnonzero(m.valid[i]))
                assert set(pos[i]) | set(neg[i]) == valid_cols
                assert set(pos[i]) & set(neg[i]) == set()

    def test_monotone_in_thresholds(self, scene, rng):
        pair, _ = _random_mask_instance(scene, rng)
        prev = None
        for t in (0.1, 0.3, 0.5, 0.9):
            masks = build_pair_masks(
                pair.geom1, pair.geom2, pair.view1_depth, pair.view2_depth,
                (7, 7), scene.rgb.shape[:2], thresholds=(t,),
            )
            m = masks[0]
            if prev is not None:
                assert np.all(m.a_image >= prev.a_image)
                assert np.all(m.a_depth >= prev.a_depth)
            prev = m

    def test_self_pair_diagonal_all_ones(self, scene, rng):
        geom, _ = sample_view_geometry(
            scene.rgb.shape[:2], AugmentConfig(max_retries=0), rng, (56, 56)
        )
        from dpr.view_aug import apply_geometry

        depth_crop = apply_geometry(scene.depth, geom, "depth")
        for m in build_pair_masks(geom, geom, depth_crop, depth_crop, (7, 7),
                                  scene.rgb.shape[:2]):
            np.testing.assert_array_equal(np.diag(m.a), 1)

    def test_vectorized_matches_double_loop_200_instances(self, scene):
        from dpr.view_aug import feature_cell_coords
        from dpr.pairs import depth_grid as pool

        rng = np.random.default_rng(123)
        checked = 0
        while checked < 200:
            pair, masks = _random_mask_instance(scene, rng, grid=(4, 4))
            coords1 = feature_cell_coords(pair.geom1, (4, 4)).reshape(-1, 2)
            coords2 = feature_cell_coords(pair.geom2, (4, 4)).reshape(-1, 2)
            d1 = pool(pair.view1_depth, (4, 4)).reshape(-1)
            d2 = pool(pair.view2_depth, (4, 4)).reshape(-1)
            for m in masks:
                t, tp = m.threshold_pair
                a_img, a_dep, a = masks_oracle(coords1, coords2, d1, d2,
                                               scene.rgb.shape[:2], t, tp)
                np.testing.assert_array_equal(m.a_image, a_img)
                np.testing.assert_array_equal(m.a_depth, a_dep)
                np.testing.assert_array_equal(m.a, a)
                checked += 1

    def test_transposed_swaps_roles(self, scene, rng):
        _, masks = _random_mask_instance(scene, rng)
        m = masks[0]
        mt = m.transposed()
        np.testing.assert_array_equal(mt.a, m.a.T)
        np.testing.assert_array_equal(mt.transposed().valid, m.valid)

    def test_hole_cells_excluded_via_validity(self):
        depth = np.full((8, 8), 0.5)
        depth[:4, :4] = 0.0  # sensor hole
        validity = cell_depth_validity(depth, (2, 2))
        assert not validity[0, 0]
        assert validity[1, 1]
