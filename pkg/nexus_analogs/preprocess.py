"""Model-ready tables from raw records.

Demand is normalized by service population and de-trended year by year so
that only its climate-sensitive part remains. Daily climate is aggregated to
17 monthly predictors and to 12 seasonal normals used for analog matching.
"""

import logging
from dataclasses import dataclass, replace
from math import ceil
from os import PathLike
from typing import Iterable, Literal, Mapping, Self, Sequence

import numpy as np
import pandas as pd

from nexus_analogs.analog import SEASON_COLUMNS
from nexus_analogs.config import OUTCOMES
from nexus_analogs.errors import DataError, NumericError
from nexus_analogs.ingest import (
    FLOAT_FORMAT, ClimateDailyRecord, DemandRecord, PopulationRecord)

__all__ = ('DAILY_VARIABLES', 'FEATURES', 'DemandSeries', 'MonthlyFeatureRow',
           'SeasonalNormals', 'TrainingTable', 'annual_seasonal',
           'build_training_table', 'demand_series', 'detrend',
           'dump_normals', 'dump_training_table', 'feature_table',
           'interpolate_gaps', 'monthly_features', 'normals_from_annual',
           'seasonal_normals', 'to_per_capita')

logger = logging.getLogger(__name__)

Stage = Literal['raw', 'per_capita', 'detrended']

DAILY_VARIABLES = ('tdry', 'twet', 'tdew', 'rh', 'wind', 'precip')

# Variables summarized by their monthly extremes and mean.
RANGE_VARIABLES = ('tdry', 'twet', 'tdew', 'rh', 'wind')

FEATURES = (*(f'{var}_{stat}' for var in RANGE_VARIABLES
              for stat in ('min', 'max', 'mean')),
            'precip_total', 'wet_days')

SEASON_MONTHS = {
    'djf': ((-1, 12), (0, 1), (0, 2)),
    'mam': ((0, 3), (0, 4), (0, 5)),
    'jja': ((0, 6), (0, 7), (0, 8)),
    'son': ((0, 9), (0, 10), (0, 11)),
}


@dataclass(frozen=True, slots=True)
class DemandSeries:
    """Monthly consumption of one city and sector keyed by (year, month)."""

    city_id: str

    sector: str

    values: Mapping[tuple[int, int], float]

    stage: Stage = 'raw'

    @property
    def years(self) -> list[int]:
        return sorted({year for year, _ in self.values})

    def to_series(self) -> pd.Series:
        index = pd.MultiIndex.from_tuples(sorted(self.values),
                                          names=['year', 'month'])
        data = [self.values[key] for key in index]
        return pd.Series(data, index=index, name=self.sector, dtype=float)


def demand_series(records: Iterable[DemandRecord], city_id: str,
                  sector: str) -> DemandSeries:
    values = {(r.year, r.month): r.value for r in records
              if r.city_id == city_id and r.sector == sector}
    return DemandSeries(city_id, sector, values, 'raw')


def to_per_capita(series: DemandSeries,
                  population: Iterable[PopulationRecord]) -> DemandSeries:
    """Divide each monthly value by the service population of its year."""
    if series.stage != 'raw':
        raise DataError(f'Per-capita normalization expects a raw series, got '
                        f'{series.stage} ({series.city_id}/{series.sector}).')
    pops = {r.year: r.service_population for r in population
            if r.city_id == series.city_id and r.sector == series.sector}
    values = {}
    for (year, month), value in sorted(series.values.items()):
        if (pop := pops.get(year)) is None:
            raise DataError(f'Missing {series.sector} service population for '
                            f'{series.city_id} in {year}.')
        values[year, month] = value / pop
    return replace(series, values=values, stage='per_capita')


def detrend(series: DemandSeries, min_months: int = 6) -> DemandSeries:
    """Rescale every year to the long-run monthly mean (Sailor-Munoz).

    Each value becomes E(y, m) * E / E_y where E_y is the mean of year y and E
    is the mean of all monthly values; the intra-annual shape is preserved.
    """
    if series.stage != 'per_capita':
        raise DataError(f'De-trending expects a per-capita series, got '
                        f'{series.stage} ({series.city_id}/{series.sector}).')
    by_year: dict[int, list[float]] = {}
    for (year, _), value in sorted(series.values.items()):
        by_year.setdefault(year, []).append(value)
    if len(by_year) < 2:
        raise DataError(f'De-trending needs at least two years of data: '
                        f'{series.city_id}/{series.sector}.')
    for year, values in by_year.items():
        if len(values) < min_months:
            raise DataError(f'Year {year} of {series.city_id}/'
                            f'{series.sector} has {len(values)} months; '
                            f'{min_months} required for de-trending.')

    grand_mean = np.mean(np.array(list(series.values.values()), dtype=float))
    year_means = {}
    for year, values in by_year.items():
        year_means[year] = np.mean(values)
        if year_means[year] == 0:
            raise NumericError(f'Year {year} of {series.city_id}/'
                               f'{series.sector} has zero mean consumption.')
    values = {(year, month): value * (grand_mean / year_means[year])
              for (year, month), value in sorted(series.values.items())}
    return replace(series, values=values, stage='detrended')


@dataclass(frozen=True, slots=True)
class MonthlyFeatureRow:
    """The 17 monthly climate predictors of a location."""

    city_id: str
    year: int
    month: int
    tdry_min: float
    tdry_max: float
    tdry_mean: float
    twet_min: float
    twet_max: float
    twet_mean: float
    tdew_min: float
    tdew_max: float
    tdew_mean: float
    rh_min: float
    rh_max: float
    rh_mean: float
    wind_min: float
    wind_max: float
    wind_mean: float
    precip_total: float
    wet_days: int

    def features(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in FEATURES}


def _daily_frame(daily: pd.DataFrame | Sequence[ClimateDailyRecord],
                 location_id: str | None = None) -> pd.DataFrame:
    if not isinstance(daily, pd.DataFrame):
        daily = pd.DataFrame([
            (r.city_id, r.date, *(getattr(r, v) for v in DAILY_VARIABLES))
            for r in daily], columns=['city_id', 'date', *DAILY_VARIABLES])
    if location_id is not None and 'city_id' in daily.columns:
        daily = daily[daily['city_id'] == location_id]
    return daily


def interpolate_gaps(daily: pd.DataFrame, max_gap: int = 3) -> pd.DataFrame:
    """Reindex one location's daily climate to a contiguous calendar.

    Runs of at most `max_gap` missing days are linearly interpolated; longer
    runs stay missing.
    """
    frame = daily.assign(date=pd.to_datetime(daily['date']))
    frame = frame.set_index('date').sort_index()[list(DAILY_VARIABLES)]
    if frame.index.has_duplicates:
        raise DataError('Daily climate has duplicate dates.')
    if frame.empty:
        return frame.astype(float)
    calendar = pd.date_range(frame.index.min(), frame.index.max(), freq='D')
    frame = frame.reindex(calendar).astype(float)
    frame.index.name = 'date'

    missing = frame.isna().any(axis=1)
    if missing.any():
        runs = (missing != missing.shift()).cumsum()
        run_length = missing.groupby(runs).transform('size')
        fillable = (missing & (run_length <= max_gap)).to_numpy()
        filled = frame.interpolate(method='linear', limit_area='inside')
        frame.loc[fillable] = filled.loc[fillable]
    return frame


def _aggregate_month(city_id: str, year: int, month: int,
                     frame: pd.DataFrame,
                     wet_threshold: float) -> MonthlyFeatureRow:
    values: dict[str, float] = {}
    for var in RANGE_VARIABLES:
        series = frame[var].to_numpy(dtype=float)
        lo, hi = float(series.min()), float(series.max())
        values[f'{var}_min'] = lo
        values[f'{var}_max'] = hi
        values[f'{var}_mean'] = min(max(float(series.mean()), lo), hi)
    precip = frame['precip'].to_numpy(dtype=float)
    values['precip_total'] = float(precip.sum())
    values['wet_days'] = int((precip >= wet_threshold).sum())
    return MonthlyFeatureRow(city_id, year, month, **values)


def monthly_features(daily: pd.DataFrame | Sequence[ClimateDailyRecord],
                     city_id: str, year: int, month: int, *,
                     wet_threshold: float = 1.0, min_coverage: float = 0.9,
                     max_gap: int = 3) -> MonthlyFeatureRow:
    """Aggregate daily climate of a city to the monthly feature row."""
    frame = interpolate_gaps(_daily_frame(daily, city_id), max_gap)
    start = pd.Timestamp(year, month, 1)
    end = start + pd.offsets.MonthEnd(0)
    present = frame.loc[start:end].dropna()
    required = ceil(min_coverage * start.days_in_month - 1e-9)
    if len(present) < required:
        raise DataError(f'Insufficient climate days for {city_id} '
                        f'{year}-{month:02d}: {len(present)} of '
                        f'{start.days_in_month} ({required} required).')
    return _aggregate_month(city_id, year, month, present, wet_threshold)


def feature_table(daily: pd.DataFrame | Sequence[ClimateDailyRecord],
                  location_id: str, *, wet_threshold: float = 1.0,
                  min_coverage: float = 0.9,
                  max_gap: int = 3) -> pd.DataFrame:
    """Monthly feature rows of a location indexed by (year, month).

    Months with insufficient coverage are left out.
    """
    frame = interpolate_gaps(_daily_frame(daily, location_id), max_gap)
    present = frame.dropna()
    rows = []
    keys = [present.index.year, present.index.month]
    for (year, month), group in present.groupby(keys, sort=True):
        days_in_month = pd.Timestamp(year, month, 1).days_in_month
        required = ceil(min_coverage * days_in_month - 1e-9)
        if len(group) < required:
            logger.debug('skip %s %d-%02d: %d of %d days', location_id, year,
                         month, len(group), days_in_month)
            continue
        row = _aggregate_month(location_id, int(year), int(month), group,
                               wet_threshold)
        rows.append((row.year, row.month, *row.features().values()))
    table = pd.DataFrame(rows, columns=['year', 'month', *FEATURES])
    return table.set_index(['year', 'month'])


@dataclass(frozen=True, slots=True)
class SeasonalNormals:
    """Seasonal climate means and interannual variability of a location.

    Both vectors follow the season-major layout of `SEASON_COLUMNS`.
    """

    location_id: str

    epoch: str

    mean12: tuple[float, ...]

    icv12: tuple[float, ...]

    n_years: int


def annual_seasonal(features: pd.DataFrame,
                    years: Iterable[int]) -> pd.DataFrame:
    """Seasonal statistics per year for every year with complete seasons.

    Seasonal minimum (maximum) temperature is the mean of the monthly minima
    (maxima) of dry bulb temperature; precipitation is the seasonal total.
    December of the previous year belongs to the winter season of a year.
    """
    rows: dict[int, list[float]] = {}
    for year in years:
        values: list[float] = []
        for season in ('djf', 'mam', 'jja', 'son'):
            keys = [(year + shift, month)
                    for shift, month in SEASON_MONTHS[season]]
            if not all(key in features.index for key in keys):
                break
            block = features.loc[keys]
            values.extend([float(block['tdry_min'].mean()),
                           float(block['tdry_max'].mean()),
                           float(block['precip_total'].sum())])
        else:
            rows[year] = values
    return pd.DataFrame.from_dict(rows, orient='index',
                                  columns=list(SEASON_COLUMNS))


def normals_from_annual(annual: np.ndarray | pd.DataFrame,
                        icv_floor: float = 1e-6) -> tuple[np.ndarray,
                                                          np.ndarray]:
    """Across-year mean and sample standard deviation, floored at
    `icv_floor`.
    """
    annual = np.asarray(annual, dtype=float)
    if annual.shape[0] < 2:
        raise DataError('At least two years are needed for variability.')
    mean = annual.mean(axis=0)
    icv = np.maximum(annual.std(axis=0, ddof=1), icv_floor)
    return mean, icv


def seasonal_normals(daily: pd.DataFrame | Sequence[ClimateDailyRecord],
                     location_id: str, year_range: range, *,
                     min_years: int = 3, icv_floor: float = 1e-6,
                     wet_threshold: float = 1.0, min_coverage: float = 0.9,
                     max_gap: int = 3) -> SeasonalNormals:
    features = feature_table(daily, location_id, wet_threshold=wet_threshold,
                             min_coverage=min_coverage, max_gap=max_gap)
    annual = annual_seasonal(features, year_range)
    if len(annual) < min_years:
        raise DataError(f'{location_id} has {len(annual)} complete years in '
                        f'{year_range.start}-{year_range.stop - 1}; '
                        f'{min_years} required for seasonal normals.')
    mean, icv = normals_from_annual(annual, icv_floor)
    epoch = f'{year_range.start}-{year_range.stop - 1}'
    return SeasonalNormals(location_id, epoch, tuple(mean.tolist()),
                           tuple(icv.tolist()), len(annual))


@dataclass(frozen=True, slots=True)
class TrainingTable:
    """Summer feature rows of a city paired with de-trended outcomes.

    Columns of `frame`: `city_id`, `year`, `month`, the feature names, then
    the outcomes `water` and `electricity`.
    """

    frame: pd.DataFrame

    feature_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def X(self) -> pd.DataFrame:
        return self.frame[list(self.feature_names)]

    @property
    def Y(self) -> pd.DataFrame:
        return self.frame[list(OUTCOMES)]

    @property
    def city_ids(self) -> list[str]:
        return sorted(self.frame['city_id'].unique())

    def select(self, feature_names: Sequence[str]) -> Self:
        missing = set(feature_names) - set(self.feature_names)
        if missing:
            raise DataError(f'Unknown features: {", ".join(sorted(missing))}.')
        columns = ['city_id', 'year', 'month', *feature_names, *OUTCOMES]
        return type(self)(self.frame[columns].reset_index(drop=True),
                          tuple(feature_names))

    @classmethod
    def concat(cls, tables: Sequence[Self]) -> Self:
        if not tables:
            raise DataError('Nothing to concatenate.')
        names = tables[0].feature_names
        if any(t.feature_names != names for t in tables):
            raise DataError('Tables have different feature sets.')
        frame = pd.concat([t.frame for t in tables], ignore_index=True)
        return cls(frame, names)


def build_training_table(features: pd.DataFrame, water: DemandSeries,
                         electricity: DemandSeries,
                         summer_months: Iterable[int] = (6, 7, 8, 9), *,
                         min_rows: int = 24) -> TrainingTable:
    """Inner join of monthly features and both de-trended outcomes over the
    summer months.
    """
    for series in (water, electricity):
        if series.stage != 'detrended':
            raise DataError(f'{series.sector} series of {series.city_id} is '
                            f'{series.stage}; de-trended series expected.')
    if water.city_id != electricity.city_id:
        raise DataError('Outcome series belong to different cities.')
    outcomes = pd.concat([water.to_series().rename('water'),
                          electricity.to_series().rename('electricity')],
                         axis=1, join='inner')
    joined = features.join(outcomes, how='inner')
    months = joined.index.get_level_values('month')
    joined = joined[months.isin(list(summer_months))].sort_index()
    if len(joined) < min_rows:
        raise DataError(f'Training table of {water.city_id} has '
                        f'{len(joined)} rows; {min_rows} required.')
    frame = joined.reset_index()
    frame.insert(0, 'city_id', water.city_id)
    frame = frame[['city_id', 'year', 'month', *FEATURES, *OUTCOMES]]
    return TrainingTable(frame.reset_index(drop=True), FEATURES)


def dump_training_table(table: TrainingTable, path: PathLike | str):
    table.frame.to_csv(path, index=False, float_format=FLOAT_FORMAT,
                       lineterminator='\n')


def dump_normals(normals: SeasonalNormals, path: PathLike | str):
    columns = ['location_id', 'epoch', 'statistic', *SEASON_COLUMNS,
               'n_years']
    rows = [(normals.location_id, normals.epoch, 'mean', *normals.mean12,
             normals.n_years),
            (normals.location_id, normals.epoch, 'icv', *normals.icv12,
             normals.n_years)]
    pd.DataFrame(rows, columns=columns).to_csv(
        path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
