import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from nexus_analogs.errors import DataError, NumericError
from nexus_analogs.ingest import DemandRecord, PopulationRecord
from nexus_analogs.preprocess import (
    FEATURES, DemandSeries, annual_seasonal, build_training_table,
    demand_series, detrend, dump_training_table, feature_table,
    interpolate_gaps, monthly_features, normals_from_annual,
    seasonal_normals, to_per_capita)
from nexus_analogs.testing import daily_frame

positive = st.floats(min_value=0.1, max_value=1e4, allow_nan=False)


def per_capita(values: dict[tuple[int, int], float]) -> DemandSeries:
    return DemandSeries('c', 'water', values, 'per_capita')


def full_years(years: range, value=lambda y, m: 1.0) -> DemandSeries:
    return per_capita({(y, m): value(y, m) for y in years
                       for m in range(1, 13)})


class TestDemandSeries:

    def test_demand_series(self):
        records = [DemandRecord('c', 'water', 2010, 1, 10.0, 'm3'),
                   DemandRecord('c', 'electricity', 2010, 1, 2.0, 'MWh'),
                   DemandRecord('d', 'water', 2010, 1, 7.0, 'm3')]
        series = demand_series(records, 'c', 'water')
        assert series.values == {(2010, 1): 10.0}
        assert series.stage == 'raw'
        assert series.to_series().loc[(2010, 1)] == 10.0

    def test_to_per_capita(self):
        raw = DemandSeries('c', 'water', {(2010, 1): 100.0, (2011, 1): 300.0})
        pops = [PopulationRecord('c', 'water', 2010, 50.0),
                PopulationRecord('c', 'water', 2011, 100.0),
                PopulationRecord('c', 'electricity', 2010, 1.0)]
        series = to_per_capita(raw, pops)
        assert series.values == {(2010, 1): 2.0, (2011, 1): 3.0}
        assert series.stage == 'per_capita'

    def test_to_per_capita_missing_year(self):
        raw = DemandSeries('c', 'water', {(2012, 6): 1.0})
        with pytest.raises(DataError):
            to_per_capita(raw, [PopulationRecord('c', 'water', 2011, 5.0)])

    def test_to_per_capita_stage(self):
        with pytest.raises(DataError):
            to_per_capita(full_years(range(2010, 2012)), [])


class TestDetrend:

    def test_two_year_ratio(self):
        series = full_years(range(2010, 2012),
                            lambda y, m: 1.0 if y == 2010 else 2.0)
        result = detrend(series)
        assert result.stage == 'detrended'
        assert result.values[2010, 6] == 1.5
        assert result.values[2011, 6] == 1.5

    def test_preserves_shape(self):
        series = full_years(range(2010, 2013), lambda y, m: (y - 2009) * m)
        result = detrend(series)
        for year in (2010, 2011, 2012):
            ratio = result.values[year, 12] / result.values[year, 1]
            assert_allclose(ratio, 12.0, rtol=1e-12)

    @settings(max_examples=50)
    @given(st.lists(positive, min_size=24, max_size=24))
    def test_year_means_equal_grand_mean(self, values: list[float]):
        series = per_capita({(2010 + i // 12, i % 12 + 1): v
                             for i, v in enumerate(values)})
        result = detrend(series)
        grand = np.mean(values)
        for year in (2010, 2011):
            year_mean = np.mean([v for (y, _), v in result.values.items()
                                 if y == year])
            assert_allclose(year_mean, grand, rtol=1e-9)

    def test_requires_two_years(self):
        with pytest.raises(DataError):
            detrend(full_years(range(2010, 2011)))

    def test_requires_months(self):
        series = full_years(range(2010, 2012))
        values = {k: v for k, v in series.values.items()
                  if k[0] == 2010 or k[1] <= 3}
        with pytest.raises(DataError):
            detrend(per_capita(values))

    def test_zero_year(self):
        series = full_years(range(2010, 2012),
                            lambda y, m: 0.0 if y == 2011 else 1.0)
        with pytest.raises(NumericError):
            detrend(series)

    def test_requires_per_capita(self):
        with pytest.raises(DataError):
            detrend(DemandSeries('c', 'water', {(2010, 1): 1.0}))


class TestMonthlyFeatures:

    def test_aggregates(self):
        daily = daily_frame('c', '2010-06-01', 30,
                            tdry=np.arange(1, 31),
                            precip=[2.0] * 10 + [0.5] * 5 + [0.0] * 15)
        row = monthly_features(daily, 'c', 2010, 6)
        assert (row.tdry_min, row.tdry_max, row.tdry_mean) == (1, 30, 15.5)
        assert row.precip_total == pytest.approx(22.5)
        assert row.wet_days == 10
        assert list(row.features()) == list(FEATURES)

    def test_wet_day_threshold(self):
        daily = daily_frame('c', '2010-06-01', 30, precip=1.0)
        assert monthly_features(daily, 'c', 2010, 6).wet_days == 30
        row = monthly_features(daily, 'c', 2010, 6, wet_threshold=1.5)
        assert row.wet_days == 0

    def test_short_gap_interpolated(self):
        daily = daily_frame('c', '2010-06-01', 30, tdry=np.arange(30.0))
        daily = daily.drop(index=[10, 11, 12]).reset_index(drop=True)
        row = monthly_features(daily, 'c', 2010, 6, min_coverage=1.0)
        assert row.tdry_mean == pytest.approx(14.5)

    def test_long_gap_missing(self):
        daily = daily_frame('c', '2010-06-01', 30)
        daily = daily.drop(index=range(5, 10)).reset_index(drop=True)
        frame = interpolate_gaps(daily, max_gap=3)
        assert frame['tdry'].isna().sum() == 5
        with pytest.raises(DataError):
            monthly_features(daily, 'c', 2010, 6, min_coverage=0.9)
        row = monthly_features(daily, 'c', 2010, 6, min_coverage=0.8)
        assert row.tdry_mean == 20.0

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(list(range(30))))
    def test_permutation_invariance(self, order: list[int]):
        rng = np.random.default_rng(0)
        daily = daily_frame('c', '2010-06-01', 30,
                            tdry=rng.normal(25, 3, 30),
                            precip=rng.exponential(2, 30))
        expected = monthly_features(daily, 'c', 2010, 6)
        shuffled = daily.iloc[order].reset_index(drop=True)
        assert monthly_features(shuffled, 'c', 2010, 6) == expected

    def test_feature_table(self):
        daily = daily_frame('c', '2010-01-01', 59)
        table = feature_table(daily, 'c')
        assert list(table.index) == [(2010, 1), (2010, 2)]
        assert list(table.columns) == list(FEATURES)

    def test_feature_table_skips_partial_month(self):
        daily = daily_frame('c', '2010-01-01', 40)
        table = feature_table(daily, 'c')
        assert list(table.index) == [(2010, 1)]


class TestSeasonalNormals:

    def test_two_year_variability(self):
        annual = np.zeros((2, 12))
        annual[:, 8] = [100.0, 200.0]
        mean, icv = normals_from_annual(annual, icv_floor=1e-6)
        assert mean[8] == 150.0
        assert_allclose(icv[8], 70.71067811865476)
        assert icv[0] == 1e-6

    def test_requires_two_years(self):
        with pytest.raises(DataError):
            normals_from_annual(np.ones((1, 12)))

    def test_winter_uses_previous_december(self):
        daily = daily_frame('c', '2009-12-01', 365 + 31)
        features = feature_table(daily, 'c')
        annual = annual_seasonal(features, range(2009, 2011))
        assert list(annual.index) == [2010]

    def test_seasonal_normals(self):
        days = pd.date_range('2009-12-01', '2013-11-30', freq='D')
        summer = np.isin(days.month, [6, 7, 8])
        daily = daily_frame('c', '2009-12-01', len(days),
                            tdry=np.where(summer, 30.0, 10.0),
                            tdew=np.where(summer, 20.0, 0.0),
                            precip=np.where(days.year == 2011, 2.0, 1.0))
        normals = seasonal_normals(daily, 'c', range(2010, 2014))
        assert normals.n_years == 4
        assert normals.epoch == '2010-2013'
        jja = dict(zip(('tmin', 'tmax', 'prcp'), normals.mean12[6:9]))
        assert jja == {'tmin': 30.0, 'tmax': 30.0, 'prcp': 92.0 * 1.25}
        assert normals.icv12[6] == 1e-6
        assert normals.icv12[8] > 0

    @settings(max_examples=10, deadline=None)
    @given(st.floats(min_value=-15, max_value=15, allow_nan=False))
    def test_seasonal_normals_shift(self, delta: float):
        rng = np.random.default_rng(4)
        days = pd.date_range('2009-12-01', '2013-11-30', freq='D')
        tdry = 15 + 10 * rng.standard_normal(len(days))
        precip = rng.exponential(2.0, len(days))
        base = seasonal_normals(daily_frame('c', '2009-12-01', len(days),
                                            tdry=tdry, precip=precip),
                                'c', range(2010, 2014))
        warm = daily_frame('c', '2009-12-01', len(days), tdry=tdry + delta,
                           twet=15 + delta, tdew=10 + delta, precip=precip)
        shifted = seasonal_normals(warm, 'c', range(2010, 2014))
        temperature = [i for i in range(12) if i % 3 != 2]
        mean, shifted_mean = np.array(base.mean12), np.array(shifted.mean12)
        assert_allclose(shifted_mean[temperature], mean[temperature] + delta,
                        atol=1e-9)
        assert_allclose(shifted_mean[2::3], mean[2::3], atol=1e-9)
        assert_allclose(shifted.icv12, base.icv12, atol=1e-9)

    def test_seasonal_normals_too_short(self):
        daily = daily_frame('c', '2009-12-01', 365 + 31)
        with pytest.raises(DataError):
            seasonal_normals(daily, 'c', range(2010, 2011))


class TestTrainingTable:

    @staticmethod
    def make(years: range = range(2010, 2016)):
        days = pd.date_range(f'{years.start}-01-01',
                             f'{years.stop - 1}-12-31', freq='D')
        rng = np.random.default_rng(1)
        daily = daily_frame('c', days[0].date().isoformat(), len(days),
                            tdry=rng.normal(20, 5, len(days)))
        features = feature_table(daily, 'c')
        months = [(y, m) for y in years for m in range(1, 13)]
        water = DemandSeries('c', 'water', {k: 1.0 + k[1] for k in months},
                             'detrended')
        electricity = DemandSeries('c', 'electricity',
                                   {k: 2.0 + k[1] for k in months},
                                   'detrended')
        return features, water, electricity

    def test_build(self):
        features, water, electricity = self.make()
        table = build_training_table(features, water, electricity)
        assert len(table) == 24
        assert table.city_ids == ['c']
        assert set(table.frame['month']) == {6, 7, 8, 9}
        assert table.X.shape == (24, 17)
        assert list(table.Y.columns) == ['water', 'electricity']
        assert table.Y['water'].iloc[0] == 7.0

    def test_min_rows(self):
        features, water, electricity = self.make()
        with pytest.raises(DataError):
            build_training_table(features, water, electricity, min_rows=25)

    def test_requires_detrended(self):
        features, water, electricity = self.make()
        raw = DemandSeries('c', 'water', water.values, 'per_capita')
        with pytest.raises(DataError):
            build_training_table(features, raw, electricity)

    def test_select(self, tmp_path):
        features, water, electricity = self.make()
        table = build_training_table(features, water, electricity)
        small = table.select(['tdry_max', 'wet_days'])
        assert small.feature_names == ('tdry_max', 'wet_days')
        assert list(small.X.columns) == ['tdry_max', 'wet_days']
        with pytest.raises(DataError):
            table.select(['snow_days'])
        dump_training_table(small, tmp_path / 'features.csv')
        dumped = pd.read_csv(tmp_path / 'features.csv')
        assert list(dumped.columns) == ['city_id', 'year', 'month',
                                        'tdry_max', 'wet_days', 'water',
                                        'electricity']
