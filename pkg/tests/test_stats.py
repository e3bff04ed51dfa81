"""Nonparametric test statistics vs brute-force and scipy oracles."""

import numpy as np
import pytest
import scipy.stats

from fedperisim import stats
from fedperisim.errors import StatTestError
from fedperisim.rng import stream


class TestIncompleteGamma:
    @pytest.mark.parametrize("a", [0.5, 1.0, 2.5, 7.0, 20.0])
    @pytest.mark.parametrize("x", [0.0, 0.1, 1.0, 4.0, 15.0, 80.0])
    def test_matches_scipy(self, a, x):
        assert stats.gamma_q(a, x) == pytest.approx(
            scipy.stats.gamma.sf(x, a), rel=1e-10, abs=1e-300)

    def test_chi2_sf_vs_quadrature(self):
        # independent oracle: integrate the chi-square density numerically
        from scipy.integrate import quad
        for df in (1, 3, 9):
            for x in (0.5, 2.0, 10.0):
                density = scipy.stats.chi2(df).pdf
                expected, _err = quad(density, x, np.inf)
                assert stats.chi2_sf(x, df) == pytest.approx(expected, rel=1e-8)


class TestChi2:
    def test_perfectly_separated_2x2(self):
        stat, p = stats.chi2_test([[10, 0], [0, 10]])
        assert stat == pytest.approx(20.0, abs=1e-12)
        assert p < 1e-4

    def test_identical_rows_give_zero_statistic(self):
        stat, p = stats.chi2_test([[25, 75], [25, 75]])
        assert stat == pytest.approx(0.0, abs=1e-12)
        assert p == pytest.approx(1.0)

    def test_matches_scipy_on_random_tables(self):
        rng = stream(0, "chi2")
        for _ in range(25):
            table = rng.integers(1, 60, size=(2, rng.integers(2, 5)))
            stat, p = stats.chi2_test(table)
            expected = scipy.stats.chi2_contingency(table, correction=False)
            assert stat == pytest.approx(expected.statistic, rel=1e-10)
            assert p == pytest.approx(expected.pvalue, rel=1e-8, abs=1e-12)

    def test_matches_brute_force_statistic(self):
        table = np.array([[12, 7, 30], [5, 20, 9]], dtype=float)
        total = table.sum()
        stat = 0.0
        for i in range(2):
            for j in range(3):
                expected = table[i].sum() * table[:, j].sum() / total
                stat += (table[i, j] - expected) ** 2 / expected
        got, _p = stats.chi2_test(table)
        assert got == pytest.approx(stat, abs=1e-10)

    def test_degenerate_table_rejected(self):
        with pytest.raises(StatTestError):
            stats.chi2_test([[0, 0], [0, 0]])
        with pytest.raises(StatTestError):
            stats.chi2_test([[5, 5]])


class TestKruskalWallis:
    def test_identical_groups_statistic_near_zero(self):
        group = list(range(50))
        h, p = stats.kruskal_wallis([group, group])
        assert h == pytest.approx(0.0, abs=1e-10)
        assert p > 0.5

    def test_matches_scipy_with_ties(self):
        rng = stream(1, "kw")
        for _ in range(20):
            groups = [rng.integers(0, 8, size=rng.integers(5, 30)).astype(float)
                      for _ in range(rng.integers(2, 5))]
            h, p = stats.kruskal_wallis(groups)
            expected = scipy.stats.kruskal(*groups)
            assert h == pytest.approx(expected.statistic, rel=1e-10, abs=1e-12)
            assert p == pytest.approx(expected.pvalue, rel=1e-8, abs=1e-12)

    def test_two_groups_equal_rank_sum_z_squared(self):
        # brute-force rank computation on a small untied instance: for two
        # groups H equals the squared standardized rank-sum statistic
        a = [1.0, 4.0, 7.0, 10.0]
        b = [2.0, 3.0, 8.0]
        pooled = sorted(a + b)
        ranks = {v: i + 1 for i, v in enumerate(pooled)}
        r_a = sum(ranks[v] for v in a)
        n, m = len(a), len(b)
        total = n + m
        mean = n * (total + 1) / 2
        var = n * m * (total + 1) / 12
        z = (r_a - mean) / np.sqrt(var)
        h, _p = stats.kruskal_wallis([a, b])
        assert h == pytest.approx(z ** 2, rel=1e-10)

    def test_constant_pooled_values_rejected(self):
        with pytest.raises(StatTestError):
            stats.kruskal_wallis([[3.0, 3.0], [3.0, 3.0]])


class TestBonferroni:
    def test_direct_rule(self):
        assert stats.bonferroni([0.01], m=9)[0] == pytest.approx(0.09)

    def test_cap_at_one(self):
        assert stats.bonferroni([0.5], m=9)[0] == 1.0

    def test_identity_for_single_test(self):
        assert stats.bonferroni([0.37], m=1)[0] == pytest.approx(0.37)

    def test_monotone(self):
        rng = stream(2, "bonf")
        p = np.sort(rng.uniform(size=20))
        adjusted = stats.bonferroni(p, m=20)
        assert np.all(np.diff(adjusted) >= 0)
        assert np.all(adjusted <= 1.0)
        assert np.all(adjusted >= p)
