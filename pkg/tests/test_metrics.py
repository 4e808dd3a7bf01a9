import numpy as np
import pytest

from streetsdf.metrics import chamfer_trimmed, depth_rmse, psnr


class TestPsnr:
    def test_identical_infinite(self):
        img = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
        assert psnr(img, img) == float("inf")

    def test_mse_001_is_20db(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)
        assert psnr(a, b) == pytest.approx(20.0)

    def test_mse_0001_is_30db(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), np.sqrt(0.001))
        assert psnr(a, b) == pytest.approx(30.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_matches_per_pixel_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (16, 16, 3))
        b = rng.uniform(0, 1, (16, 16, 3))
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse))


class TestDepthRmse:
    def test_unit_errors(self):
        assert depth_rmse(np.array([1.0, 2.0]), np.array([0.0, 1.0])) == \
            pytest.approx(1.0)

    def test_three_four(self):
        assert depth_rmse(np.array([3.0, 4.0]), np.array([0.0, 0.0])) == \
            pytest.approx(np.sqrt(12.5))

    def test_exact_zero(self):
        d = np.array([5.0, 9.0])
        assert depth_rmse(d, d) == 0.0

    def test_validity_mask(self):
        pred = np.array([1.0, 100.0])
        gt = np.array([0.0, 0.0])
        assert depth_rmse(pred, gt, valid=np.array([True, False])) == \
            pytest.approx(1.0)

    def test_no_valid_beams(self):
        with pytest.raises(ValueError):
            depth_rmse(np.array([1.0]), np.array([1.0]), valid=np.array([False]))

    def test_rmse_at_least_mae(self):
        rng = np.random.default_rng(2)
        pred = rng.normal(size=100)
        gt = rng.normal(size=100)
        assert depth_rmse(pred, gt) >= np.mean(np.abs(pred - gt)) - 1e-12


def chamfer_oracle(pred, gt, keep_frac):
    """Naive O(n^2) trimmed Chamfer recomputation (tie-inclusive trim)."""
    d2_gt = np.array([min(((g - p) ** 2).sum() for p in pred) for g in gt])
    k = max(1, int(round(keep_frac * len(gt))))
    thresh = np.sort(d2_gt)[k - 1]
    kept = gt[d2_gt <= thresh]
    gt_term = d2_gt[d2_gt <= thresh].mean()
    pred_term = np.mean([min(((p - g) ** 2).sum() for g in kept) for p in pred])
    return gt_term + pred_term


class TestChamfer:
    def test_self_distance_zero(self):
        x = np.random.default_rng(3).normal(size=(64, 3))
        assert chamfer_trimmed(x, x, keep_frac=1.0) == pytest.approx(0.0, abs=1e-12)
        assert chamfer_trimmed(x, x) == pytest.approx(0.0, abs=1e-12)

    def test_hand_case(self):
        pred = np.array([[0.5, 0.0, 0.0]])
        gt = np.array([[0.0, 0.0, 0.0]])
        assert chamfer_trimmed(pred, gt, keep_frac=1.0) == pytest.approx(0.5)

    def test_outlier_excluded_by_trim(self):
        rng = np.random.default_rng(4)
        pred = rng.normal(size=(100, 3)) * 0.01
        gt = pred.copy()
        gt[-1] = [500.0, 0.0, 0.0]  # far outlier among 100 points
        trimmed = chamfer_trimmed(pred, gt, keep_frac=0.97)
        untrimmed = chamfer_trimmed(pred, gt, keep_frac=1.0)
        assert trimmed < 1.0 < untrimmed
        assert trimmed == pytest.approx(chamfer_oracle(pred, gt, 0.97), rel=1e-10)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(5)
        for keep in (1.0, 0.97, 0.5):
            pred = rng.normal(size=(40, 3))
            gt = rng.normal(size=(37, 3))
            fast = chamfer_trimmed(pred, gt, keep_frac=keep)
            brute = chamfer_trimmed(pred, gt, keep_frac=keep, brute_force=True)
            oracle = chamfer_oracle(pred, gt, keep)
            assert fast == pytest.approx(oracle, rel=1e-12)
            assert brute == pytest.approx(oracle, rel=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        assert chamfer_trimmed(rng.normal(size=(10, 3)),
                               rng.normal(size=(12, 3))) >= 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chamfer_trimmed(np.zeros((0, 3)), np.zeros((1, 3)))
