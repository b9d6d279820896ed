from math import erf, sqrt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from nexus_analogs.analog import (
    SEASON_COLUMNS, AnalogQuery, chi_cdf, chi_sf, gamma_p, gamma_q,
    rank_analogs, sed_distance, sigma_dissimilarity, standardize_anomaly)
from nexus_analogs.errors import DataError
from nexus_analogs.preprocess import SeasonalNormals
from nexus_analogs.synth import oracle_chi

distances = st.floats(min_value=0, max_value=40, allow_nan=False)


def normals(location_id: str, mean: float = 0.0,
            icv: float = 1.0) -> SeasonalNormals:
    return SeasonalNormals(location_id, '2007-2018', (mean, ) * 12,
                           (icv, ) * 12, 11)


class TestIncompleteGamma:

    @pytest.mark.parametrize('a', [0.5, 1.0, 3.0, 8.0])
    @pytest.mark.parametrize('x', [0.0, 0.1, 1.0, 5.0, 30.0])
    def test_complement(self, a: float, x: float):
        assert_allclose(gamma_p(a, x) + gamma_q(a, x), 1.0, atol=1e-14)

    def test_exponential(self):
        # P(1, x) is the exponential CDF.
        for x in (0.3, 2.0, 7.5):
            assert_allclose(gamma_p(1.0, x), 1 - np.exp(-x), rtol=1e-13)


class TestChi:

    def test_one_degree(self):
        assert_allclose(chi_cdf(1.0, 1), 0.6826894921, atol=1e-10)
        for x in (0.2, 1.7, 3.1):
            assert_allclose(chi_cdf(x, 1), erf(x / sqrt(2)), atol=1e-14)

    def test_twelve_degrees(self):
        assert 0 < chi_cdf(3.0, 12) < 1

    def test_bounds(self):
        assert chi_cdf(0.0, 12) == 0.0
        assert chi_sf(0.0, 12) == 1.0
        assert chi_cdf(-1.0, 3) == 0.0

    def test_oracle(self):
        for k in range(1, 17):
            for x in np.linspace(0.1, 10, 34):
                assert abs(chi_cdf(x, k) - oracle_chi(x, k)) <= 1e-10, (x, k)

    @given(st.floats(0, 20), st.floats(0, 20), st.integers(1, 16))
    def test_monotone(self, x: float, y: float, k: int):
        lo, hi = sorted((x, y))
        assert chi_cdf(lo, k) <= chi_cdf(hi, k) + 1e-15
        assert 0 <= chi_cdf(hi, k) <= 1


class TestSigmaDissimilarity:

    @pytest.mark.parametrize('distance', [0.25, 1.0, 2.5, 5.0, 8.0])
    def test_identity_in_one_dimension(self, distance: float):
        sigma, saturated = sigma_dissimilarity(distance, k=1)
        assert not saturated
        assert_allclose(sigma, distance, atol=1e-9)

    def test_zero_distance(self):
        assert sigma_dissimilarity(0.0) == (0.0, False)

    def test_pinned_value(self):
        sigma, saturated = sigma_dissimilarity(3.0, k=12)
        assert not saturated
        assert_allclose(chi_sf(sigma, 1), chi_sf(3.0, 12), rtol=1e-8)

    def test_saturation(self):
        assert sigma_dissimilarity(50.0, k=12) == (10.0, True)
        assert sigma_dissimilarity(1e6, k=12, cap=4.0) == (4.0, True)

    def test_negative_distance(self):
        with pytest.raises(DataError):
            sigma_dissimilarity(-1.0)

    @settings(max_examples=50)
    @given(distances, distances)
    def test_monotone(self, d1: float, d2: float):
        lo, hi = sorted((d1, d2))
        assert sigma_dissimilarity(lo)[0] <= sigma_dissimilarity(hi)[0] + 1e-9

    @settings(max_examples=50)
    @given(distances, st.integers(min_value=1, max_value=15))
    def test_non_increasing_in_dimension(self, distance: float, k: int):
        assert (sigma_dissimilarity(distance, k + 1)[0] <=
                sigma_dissimilarity(distance, k)[0] + 1e-9)

    @settings(max_examples=50)
    @given(distances)
    def test_range(self, distance: float):
        sigma, saturated = sigma_dissimilarity(distance)
        assert 0 <= sigma <= 10
        assert saturated == (sigma == 10)


class TestDistance:

    def test_standardize_anomaly(self):
        candidate = normals('c', mean=1.0, icv=2.0)
        z = standardize_anomaly((5.0, ) * 12, candidate)
        assert_allclose(z, np.full(12, 2.0))
        assert sed_distance(z) == pytest.approx(sqrt(48))

    def test_sed_distance(self):
        assert sed_distance([3.0, 4.0]) == 5.0
        assert sed_distance(np.zeros(12)) == 0.0


class TestRankAnalogs:

    def test_ranking(self):
        query = AnalogQuery('t', 'rcp85', (1.0, ) * 12)
        pool = [normals('far', mean=5.0), normals('near', mean=1.5),
                normals('same', mean=1.0)]
        ranking = rank_analogs(query, pool)
        assert [r.candidate_id for r in ranking] == ['same', 'near', 'far']
        assert [r.rank for r in ranking] == [1, 2, 3]
        assert ranking[0].sigma == 0.0
        assert ranking[-1].saturated

    def test_ties_by_id(self):
        query = AnalogQuery('t', 'rcp45', (0.0, ) * 12)
        pool = [normals('b', mean=1.0), normals('a', mean=-1.0)]
        ranking = rank_analogs(query, pool)
        assert [r.candidate_id for r in ranking] == ['a', 'b']
        assert ranking[0].sigma == ranking[1].sigma

    def test_empty_pool(self):
        with pytest.raises(DataError):
            rank_analogs(AnalogQuery('t', 'rcp85', (0.0, ) * 12), [])

    def test_query_length(self):
        with pytest.raises(DataError):
            AnalogQuery('t', 'rcp85', (0.0, ) * 11)
        assert len(SEASON_COLUMNS) == 12
