import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tridiff import metrics as mt


class TestNfs:
    def test_constant_depth_is_one(self):
        rep = mt.nfs(np.full((8, 8), 3.3))
        assert rep.per_image[0] == 1.0
        assert rep.mean == 1.0

    def test_uniform_histogram_is_bin_count(self):
        # exactly one value per bin center
        bins = 64
        vals = (np.arange(bins) + 0.5) / bins * 2.0 + 1.0
        d = vals.reshape(8, 8)
        rep = mt.nfs(d, bins=bins)
        assert abs(rep.per_image[0] - 64.0) < 1e-9

    def test_mean_between_extremes(self):
        flat = np.full((8, 8), 2.0)
        varied = np.linspace(1, 2, 64).reshape(8, 8)
        rep = mt.nfs([flat, varied])
        lo, hi = sorted(rep.per_image)
        assert lo < rep.mean < hi

    def test_affine_invariance_exact(self):
        rng = np.random.default_rng(0)
        d = rng.uniform(2.25, 5.0, size=(16, 16))
        base = mt.nfs(d).per_image[0]
        for a, b in [(2.0, 0.0), (4.0, 1.0), (0.5, 3.0), (3.7, 0.2)]:
            assert mt.nfs(a * d + b).per_image[0] == base

    @given(st.floats(0.1, 8.0), st.floats(0.0, 5.0))
    @settings(max_examples=100, deadline=None)
    def test_affine_invariance_property(self, a, b):
        d = np.random.default_rng(42).uniform(1.0, 4.0, size=(12, 12))
        assert mt.nfs(a * d + b).per_image[0] == mt.nfs(d).per_image[0]

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        d = rng.uniform(1.0, 4.0, size=(10, 10))
        shuffled = rng.permutation(d.ravel()).reshape(10, 10)
        assert mt.nfs(d).per_image[0] == mt.nfs(shuffled).per_image[0]

    def test_value_range(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            d = rng.uniform(0.5, 6.0, size=(9, 9))
            v = mt.nfs(d).per_image[0]
            assert 1.0 <= v <= 64.0

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            mt.nfs(np.zeros((4, 4)))


class TestReconMetrics:
    def test_identical_images(self):
        img = np.random.default_rng(3).uniform(0, 1, (3, 8, 8))
        rep = mt.recon_metrics(img, img)
        assert rep["l1"] == 0.0
        assert rep["psnr"] == 99.0

    def test_uniform_offset(self):
        img = np.random.default_rng(4).uniform(0.2, 0.8, (3, 8, 8))
        rep = mt.recon_metrics(img, img + 0.1)
        assert abs(rep["l1"] - 0.1) < 1e-12
        assert abs(rep["psnr"] - 20.0) < 1e-9

    def test_monotone_consistency(self):
        img = np.random.default_rng(5).uniform(0.3, 0.6, (3, 8, 8))
        offsets = [0.05, 0.1, 0.2, 0.3]
        l1s = [mt.recon_metrics(img, img + o)["l1"] for o in offsets]
        psnrs = [mt.recon_metrics(img, img + o)["psnr"] for o in offsets]
        assert all(np.diff(l1s) > 0)
        assert all(np.diff(psnrs) < 0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mt.recon_metrics(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)))
