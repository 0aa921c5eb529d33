import math

import numpy as np
import pytest

from varprop.metrics import (
    TllConfig, error_vs_uncertainty_quantile, gaussian_tll, gaussian_tll_closed, rmse, sampled_tll,
)


def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5))
    with pytest.raises(ValueError):
        rmse([1, 2], [1])
    with pytest.raises(ValueError):
        rmse([], [])


class TestTll:
    def test_closed_form_values(self):
        # log N(0; 0, 1) = -0.5 log(2 pi)
        assert gaussian_tll_closed([0.0], [0.0], [0.0], 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
        assert gaussian_tll_closed([0.0], [0.0], [0.0], 1.0) == pytest.approx(-0.9189, abs=1e-4)
        # variance 1 + 1 = 2 with the target at the mean
        assert gaussian_tll_closed([0.0], [1.0], [0.0], 1.0) == pytest.approx(-1.2655, abs=1e-4)
        assert gaussian_tll_closed([0.0], [1.0], [1.0], 1.0) == pytest.approx(-0.5 * math.log(4 * math.pi) - 0.25)

    def test_sampled_point_mass(self):
        s = np.zeros((10, 1))
        assert sampled_tll(s, [0.0], 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_sampled_matches_closed(self, rng):
        m, v = rng.normal(size=50), rng.uniform(0.01, 1.0, size=50)
        y = m + rng.normal(size=50)
        for tau in (0.5, 1.0, 4.0):
            s = gaussian_tll(m, v, y, TllConfig(tau=tau, n_samples=10_000), seed=0)
            assert abs(s - gaussian_tll_closed(m, v, y, tau)) < 0.01

    def test_sampled_deterministic(self, rng):
        m, v, y = rng.normal(size=5), np.ones(5), rng.normal(size=5)
        cfg = TllConfig(n_samples=1000)
        assert gaussian_tll(m, v, y, cfg, seed=3) == gaussian_tll(m, v, y, cfg, seed=3)

    def test_extreme_targets_finite(self):
        assert np.isfinite(sampled_tll(np.zeros((3, 1)), [1e3], 10.0))

    def test_validation(self):
        with pytest.raises(ValueError):
            gaussian_tll_closed([0.0], [-1.0], [0.0], 1.0)
        with pytest.raises(ValueError):
            gaussian_tll_closed([0.0], [1.0], [0.0], 0.0)
        with pytest.raises(ValueError):
            TllConfig(tau=-1)
        with pytest.raises(ValueError):
            TllConfig(n_samples=0)
        with pytest.raises(ValueError):
            sampled_tll(np.zeros((3, 2)), [0.0], 1.0)
        with pytest.raises(ValueError):
            gaussian_tll([0.0], [-1.0], [0.0], TllConfig(), seed=0)


class TestQuantiles:
    def test_flat(self):
        out = error_vs_uncertainty_quantile(np.arange(10.0), np.ones(10), n_bins=5)
        assert [e for _, e in out] == [1.0] * 5
        assert [q for q, _ in out] == [0.2, 0.4, 0.6, 0.8, 1.0]

    def test_increasing(self):
        u = np.array([3.0, 1.0, 2.0, 0.0])
        out = error_vs_uncertainty_quantile(u, u * 10, n_bins=4)
        assert [e for _, e in out] == [0.0, 10.0, 20.0, 30.0]

    def test_bin_count_validation(self):
        with pytest.raises(ValueError):
            error_vs_uncertainty_quantile([1.0, 2.0], [1.0, 2.0], n_bins=3)
        with pytest.raises(ValueError):
            error_vs_uncertainty_quantile([1.0], [1.0, 2.0], n_bins=1)
