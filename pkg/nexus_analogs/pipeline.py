"""Scientific workflow on top of the preprocessing and model layers.

Cross-validated skill of city models, regional variable selection, analog
projections of summer demand, SSP-scaled electricity totals with emissions
equivalences, and deterministic report files.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from math import ceil
from os import PathLike
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence, TypeVar

import numpy as np
import pandas as pd

from nexus_analogs.analog import AnalogResult
from nexus_analogs.config import OUTCOMES, EmissionsConfig, Hyperparams
from nexus_analogs.errors import DataError, NumericError
from nexus_analogs.ingest import FLOAT_FORMAT, CityRecord, DatasetBundle
from nexus_analogs.mvtb import (
    BoostedNexusModel, fit, make_rng, predict, relative_influence)
from nexus_analogs.preprocess import (
    DemandSeries, TrainingTable, build_training_table, demand_series,
    detrend, feature_table, to_per_capita)

__all__ = ('CityData', 'Equivalences', 'FoldMetrics', 'MetricsReport',
           'ProjectionResult', 'RegionalVariableSet', 'Reports',
           'TotalsResult', 'aggregate_totals', 'city_totals', 'co2e_delta',
           'cross_validate_city', 'equivalences', 'kfold_splits',
           'latitude_gradient', 'location_features', 'map_cities', 'nrmse',
           'percent_change', 'prepare_city', 'project_with_analog', 'r2',
           'rank_variables', 'select_regional_variables',
           'ssp_total_demand', 'summarize', 'summer_per_capita',
           'write_json', 'write_reports')

logger = logging.getLogger(__name__)

T = TypeVar('T')

R = TypeVar('R')

AGGREGATE_ID = 'all'


# Data preparation.


def location_features(bundle: DatasetBundle, location_id: str, *,
                      study_years: range | None = None,
                      wet_threshold: float = 1.0, min_coverage: float = 0.9,
                      max_gap: int = 3) -> pd.DataFrame:
    features = feature_table(bundle.climate_for(location_id), location_id,
                             wet_threshold=wet_threshold,
                             min_coverage=min_coverage, max_gap=max_gap)
    if study_years is not None:
        years = features.index.get_level_values('year')
        features = features[years.isin(list(study_years))]
    if features.empty:
        raise DataError(f'No climate months for location {location_id}.')
    return features


@dataclass(frozen=True)
class CityData:
    """Model-ready data of a city."""

    city_id: str

    table: TrainingTable

    per_capita: dict[str, DemandSeries]


def _within(series: DemandSeries, years: range) -> DemandSeries:
    values = {key: v for key, v in series.values.items() if key[0] in years}
    return DemandSeries(series.city_id, series.sector, values, series.stage)


def prepare_city(bundle: DatasetBundle, city_id: str, *, study_years: range,
                 summer_months: Sequence[int] = (6, 7, 8, 9),
                 wet_threshold: float = 1.0, min_coverage: float = 0.9,
                 max_gap: int = 3, min_rows: int = 24) -> CityData:
    """Normalize and de-trend demand of a city and join it with its summer
    climate features.
    """
    per_capita, detrended = {}, {}
    for sector in OUTCOMES:
        raw = _within(demand_series(bundle.demand, city_id, sector),
                      study_years)
        per_capita[sector] = to_per_capita(raw, bundle.population)
        detrended[sector] = detrend(per_capita[sector])
    features = location_features(bundle, city_id, study_years=study_years,
                                 wet_threshold=wet_threshold,
                                 min_coverage=min_coverage, max_gap=max_gap)
    table = build_training_table(features, detrended['water'],
                                 detrended['electricity'], summer_months,
                                 min_rows=min_rows)
    return CityData(city_id, table, per_capita)


# Skill metrics.


def kfold_splits(n: int, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold index of every row of a seeded random partition into `k` folds
    whose sizes differ by at most one.
    """
    if k < 2:
        raise DataError(f'At least two folds are required: k={k}.')
    if n < k:
        raise DataError(f'Cannot split {n} rows into {k} folds.')
    perm = make_rng(seed).permutation(n)
    folds = np.empty(n, dtype=int)
    for fold, rows in enumerate(np.array_split(perm, k)):
        folds[rows] = fold
    return folds


def r2(y: Sequence[float] | np.ndarray,
       y_hat: Sequence[float] | np.ndarray) -> float:
    """Coefficient of determination."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    total = float(np.square(y - y.mean()).sum())
    if total <= 0:
        raise NumericError('R2 is undefined for constant observations.')
    return 1 - float(np.square(y - y_hat).sum()) / total


def nrmse(y: Sequence[float] | np.ndarray,
          y_hat: Sequence[float] | np.ndarray) -> float:
    """Root mean squared error normalized by the mean of observations."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if (mean := float(y.mean())) <= 0:
        raise NumericError(f'NRMSE needs a positive mean, got {mean}.')
    return float(np.sqrt(np.square(y - y_hat).mean())) / mean


@dataclass(frozen=True, slots=True)
class FoldMetrics:

    fold: int | str

    outcome: str

    r2: float

    nrmse: float


@dataclass(frozen=True)
class MetricsReport:
    """Per-fold and pooled out-of-fold skill of a city model."""

    city_id: str

    folds: tuple[FoldMetrics, ...]

    out_of_fold: np.ndarray = field(repr=False, compare=False)

    def pooled(self, outcome: str) -> FoldMetrics:
        for entry in self.folds:
            if entry.fold == 'pooled' and entry.outcome == outcome:
                return entry
        raise KeyError(outcome)

    def rows(self) -> list[tuple[str, str, str, float, float]]:
        return [(self.city_id, m.outcome, str(m.fold), m.r2, m.nrmse)
                for m in self.folds]


def _metrics(y: np.ndarray, y_hat: np.ndarray) -> tuple[float, float]:
    try:
        score = r2(y, y_hat)
    except NumericError:
        score = float('nan')
    return score, nrmse(y, y_hat)


def cross_validate_city(table: TrainingTable,
                        hyper: Hyperparams = Hyperparams(), k: int = 5,
                        seed: int = 0) -> MetricsReport:
    """Seeded k-fold cross-validation of a city model.

    Pooled metrics are computed on the out-of-fold predictions of all rows.
    A fold whose held-out observations are constant reports NaN for R2.
    """
    if len(table) < 2 * k:
        raise DataError(f'{len(table)} rows are too few for {k}-fold '
                        'cross-validation.')
    X = table.X.to_numpy(dtype=float)
    Y = table.Y.to_numpy(dtype=float)
    folds = kfold_splits(len(table), k, seed)
    oof = np.empty_like(Y)
    entries: list[FoldMetrics] = []
    for fold in range(k):
        test = folds == fold
        model = fit(X[~test], Y[~test], hyper,
                    feature_names=table.feature_names,
                    outcome_names=OUTCOMES)
        oof[test] = predict(model, X[test])
        for j, outcome in enumerate(OUTCOMES):
            score, error = _metrics(Y[test, j], oof[test, j])
            entries.append(FoldMetrics(fold, outcome, score, error))
    for j, outcome in enumerate(OUTCOMES):
        entries.append(FoldMetrics('pooled', outcome, r2(Y[:, j], oof[:, j]),
                                   nrmse(Y[:, j], oof[:, j])))
    city = ','.join(table.city_ids)
    report = MetricsReport(city, tuple(entries), oof)
    logger.info('%s: pooled R2 water %.3f electricity %.3f', city,
                report.pooled('water').r2, report.pooled('electricity').r2)
    return report


# Regional variable selection.


@dataclass(frozen=True)
class RegionalVariableSet:
    """Features selected for every city of a region, most influential
    first.
    """

    region: str

    features: tuple[str, ...]

    influence: dict[str, float]

    model: BoostedNexusModel | None = field(default=None, repr=False,
                                            compare=False)

    table: TrainingTable | None = field(default=None, repr=False,
                                        compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {'features': list(self.features),
                'influence': {k: self.influence[k]
                              for k in sorted(self.influence)}}


def rank_variables(influence: Mapping[str, float], threshold: float = 90.0,
                   bounds: tuple[int, int] = (4, 6)) -> tuple[str, ...]:
    """Smallest prefix of the influence ranking reaching `threshold` percent,
    clamped to `bounds`. Equal influence is ordered by feature name.
    """
    ranking = sorted(influence, key=lambda name: (-influence[name], name))
    total = sum(influence.values())
    cumulative, count = 0.0, len(ranking)
    for index, name in enumerate(ranking, 1):
        cumulative += influence[name]
        if total > 0 and 100 * cumulative / total >= threshold - 1e-9:
            count = index
            break
    lo, hi = bounds
    count = min(max(count, lo), hi, len(ranking))
    return tuple(ranking[:count])


def select_regional_variables(region: str, tables: Sequence[TrainingTable],
                              hyper: Hyperparams = Hyperparams(), *,
                              threshold: float = 90.0,
                              bounds: tuple[int, int] = (4, 6)
                              ) -> RegionalVariableSet:
    """Fit one model on the pooled rows of a region and keep the features
    carrying most of its influence averaged over both outcomes.
    """
    if not tables:
        raise DataError(f'Region {region} has no usable city.')
    pooled = TrainingTable.concat(tables)
    model = fit(pooled.X, pooled.Y, hyper)
    influence = relative_influence(model).mean(axis=1)
    scores = {name: float(influence[name]) for name in pooled.feature_names}
    features = rank_variables(scores, threshold, bounds)
    logger.info('region %s: selected %s', region, ', '.join(features))
    return RegionalVariableSet(region, features, scores, model, pooled)


# Projections.


def percent_change(baseline: float, projected: float) -> float:
    if baseline <= 0:
        raise NumericError(f'Baseline demand must be positive: {baseline}.')
    return 100 * (projected - baseline) / baseline


@dataclass(frozen=True, slots=True)
class ProjectionResult:
    """Mean predicted summer demand under observed and analog climate."""

    city_id: str

    scenario: str

    analog_id: str

    baseline_mean: dict[str, float]

    projected_mean: dict[str, float]

    @property
    def pct_change(self) -> dict[str, float]:
        return {k: percent_change(v, self.projected_mean[k])
                for k, v in self.baseline_mean.items()}

    def rows(self) -> list[tuple[str, str, str, float, float, float]]:
        pct = self.pct_change
        return [(self.city_id, self.scenario, outcome,
                 self.baseline_mean[outcome], self.projected_mean[outcome],
                 pct[outcome]) for outcome in self.baseline_mean]


def project_with_analog(model: BoostedNexusModel, observed: pd.DataFrame,
                        analog: pd.DataFrame, *, city_id: str = '',
                        scenario: str = '',
                        analog_id: str = '') -> ProjectionResult:
    """Substitute the climate of an analog location into a city model.

    Both feature frames are indexed by (year, month); the analog must cover
    every row of the observed grid.
    """
    missing = observed.index.difference(analog.index)
    if len(missing):
        months = ', '.join(f'{y}-{m:02d}' for y, m in missing[:5])
        raise DataError(f'Analog {analog_id or "location"} lacks climate for '
                        f'{len(missing)} months of {city_id}: {months}.')
    baseline = predict(model, observed).mean(axis=0)
    projected = predict(model, analog.loc[observed.index]).mean(axis=0)
    for outcome, value in zip(model.outcome_names, baseline):
        if value <= 0:
            raise NumericError(f'Non-positive baseline {outcome} demand for '
                               f'{city_id}: {value}.')
    return ProjectionResult(
        city_id, scenario, analog_id,
        dict(zip(model.outcome_names, baseline.tolist())),
        dict(zip(model.outcome_names, projected.tolist())))


# Totals and emissions.


@dataclass(frozen=True, slots=True)
class Equivalences:

    turbines: int

    forest_km2: float

    dam_days: float


@dataclass(frozen=True, slots=True)
class TotalsResult:
    """Monthly summer electricity of a city under an SSP and a scenario."""

    city_id: str

    ssp: int

    scenario: str

    current_total: float

    projected_total: float

    delta: float

    co2e: float

    equivalences: Equivalences

    def row(self) -> tuple:
        eq = self.equivalences
        return (self.city_id, f'SSP{self.ssp}', self.scenario,
                self.current_total, self.projected_total, self.delta,
                self.co2e, eq.turbines, eq.forest_km2, eq.dam_days)


def summer_per_capita(series: DemandSeries,
                      summer_months: Sequence[int] = (6, 7, 8, 9)) -> float:
    """Mean summer per-capita demand before de-trending."""
    if series.stage != 'per_capita':
        raise DataError(f'Expected a per-capita series, got {series.stage}.')
    summer = [v for (_, month), v in sorted(series.values.items())
              if month in summer_months]
    if not summer:
        raise DataError(f'No summer {series.sector} demand for '
                        f'{series.city_id}.')
    return float(np.mean(summer))


def ssp_total_demand(pct_change: float, current_total: float, pop_now: float,
                     pop_future: float) -> tuple[float, float]:
    """Projected total and its delta to the current total."""
    for name, value in (('current_total', current_total),
                        ('pop_now', pop_now), ('pop_future', pop_future)):
        if value <= 0:
            raise DataError(f'{name} must be positive: {value}.')
    projected = current_total * (1 + pct_change / 100) * (pop_future
                                                          / pop_now)
    return projected, projected - current_total


def co2e_delta(delta_mwh: float,
               config: EmissionsConfig = EmissionsConfig()) -> float:
    """Emissions of an electricity delta in metric tons of CO2e."""
    return delta_mwh * config.co2e_factor


def equivalences(delta_mwh: float,
                 config: EmissionsConfig = EmissionsConfig(),
                 co2e: float | None = None) -> Equivalences:
    """Wind turbines, forest area and hydropower dam days equal to a delta.

    The turbine count is rounded away from zero.
    """
    if co2e is None:
        co2e = co2e_delta(delta_mwh, config)
    output = (config.turbine_rating * config.capacity_factor
              * config.hours_per_month)
    turbines = ceil(abs(delta_mwh) / output)
    return Equivalences(turbines=turbines if delta_mwh >= 0 else -turbines,
                        forest_km2=co2e / config.forest_rate,
                        dam_days=delta_mwh / config.dam_daily_output)


def city_totals(city_id: str, pct_change: Mapping[str, float],
                per_capita: float,
                populations: Mapping[int, tuple[float, float]],
                config: EmissionsConfig = EmissionsConfig()
                ) -> list[TotalsResult]:
    """Totals of a city for every SSP and scenario.

    `pct_change` maps scenario to the electricity percent change and
    `populations` maps SSP to (present, future) population. The current
    total is the mean summer per-capita demand times the present population.
    """
    results = []
    for ssp, (pop_now, pop_future) in sorted(populations.items()):
        current_total = per_capita * pop_now
        for scenario, pct in sorted(pct_change.items()):
            projected, delta = ssp_total_demand(pct, current_total, pop_now,
                                                pop_future)
            co2e = co2e_delta(delta, config)
            results.append(TotalsResult(
                city_id, ssp, scenario, current_total, projected, delta,
                co2e, equivalences(delta, config, co2e)))
    return results


def aggregate_totals(totals: Iterable[TotalsResult],
                     config: EmissionsConfig = EmissionsConfig()
                     ) -> list[TotalsResult]:
    """Sum totals over cities per (SSP, scenario)."""
    groups: dict[tuple[int, str], list[TotalsResult]] = {}
    for item in totals:
        if item.city_id != AGGREGATE_ID:
            groups.setdefault((item.ssp, item.scenario), []).append(item)
    results = []
    for (ssp, scenario), items in sorted(groups.items()):
        current = sum(t.current_total for t in items)
        projected = sum(t.projected_total for t in items)
        delta = sum(t.delta for t in items)
        co2e = sum(t.co2e for t in items)
        results.append(TotalsResult(AGGREGATE_ID, ssp, scenario, current,
                                    projected, delta, co2e,
                                    equivalences(delta, config, co2e)))
    return results


def latitude_gradient(projections: Iterable[ProjectionResult],
                      registry: Mapping[str, CityRecord]
                      ) -> dict[str, dict[str, float | None]]:
    """Least-squares slope of percent change against latitude (percent per
    degree) per scenario and outcome; None with fewer than two latitudes.
    """
    points: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for result in projections:
        if (city := registry.get(result.city_id)) is None:
            continue
        for outcome, pct in result.pct_change.items():
            points.setdefault((result.scenario, outcome), []).append(
                (city.lat, pct))
    gradient: dict[str, dict[str, float | None]] = {}
    for (scenario, outcome), pairs in sorted(points.items()):
        lat, pct = np.array(pairs).T
        slope = None
        if len(np.unique(lat)) >= 2:
            slope = float(np.polyfit(lat, pct, 1)[0])
        gradient.setdefault(scenario, {})[outcome] = slope
    return gradient


# Reports.


@dataclass
class Reports:
    """Results gathered for writing; absent parts are not written."""

    metrics: list[MetricsReport] = field(default_factory=list)

    projections: list[ProjectionResult] = field(default_factory=list)

    totals: list[TotalsResult] = field(default_factory=list)

    influence: dict[str, pd.DataFrame] = field(default_factory=dict)

    ranked: dict[tuple[str, str], list[AnalogResult]] = field(
        default_factory=dict)

    covariance: dict[str, pd.DataFrame] = field(default_factory=dict)

    registry: dict[str, CityRecord] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return any((self.metrics, self.projections, self.totals,
                    self.influence, self.ranked, self.covariance))


def _write_csv(rows: Sequence[Sequence[Any]], columns: Sequence[str],
               path: Path):
    frame = pd.DataFrame(list(rows), columns=list(columns))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT,
                 lineterminator='\n')
    logger.info('wrote %d rows to %s', len(frame), path)


def write_json(obj: Any, path: Path):
    with open(path, 'w', encoding='utf-8') as fout:
        json.dump(obj, fout, indent=2, sort_keys=True, allow_nan=False)
        fout.write('\n')
    logger.info('wrote %s', path)


def _finite(value: float) -> float | None:
    return value if np.isfinite(value) else None


def summarize(metrics: Sequence[MetricsReport]) -> dict[str, Any]:
    """Medians of pooled metrics across cities."""
    summary: dict[str, Any] = {'n_cities': len(metrics)}
    for outcome in OUTCOMES:
        pooled = [report.pooled(outcome) for report in metrics]
        summary[outcome] = {
            'median_r2': _finite(float(np.median([m.r2 for m in pooled]))),
            'median_nrmse': _finite(float(np.median([m.nrmse
                                                     for m in pooled]))),
        }
    return summary


def _summarize_projections(reports: Reports) -> dict[str, Any]:
    medians: dict[str, dict[str, float]] = {}
    by_key: dict[tuple[str, str], list[float]] = {}
    for result in reports.projections:
        for outcome, pct in result.pct_change.items():
            by_key.setdefault((result.scenario, outcome), []).append(pct)
    for (scenario, outcome), values in sorted(by_key.items()):
        medians.setdefault(scenario, {})[outcome] = float(np.median(values))
    return {'median_pct_change': medians,
            'latitude_gradient': latitude_gradient(reports.projections,
                                                   reports.registry)}


def write_reports(reports: Reports, out_dir: PathLike | str) -> list[Path]:
    """Write every non-empty part of `reports` to `out_dir`.

    Rows are sorted by city id so that files are byte-identical across
    runs.
    """
    if not reports:
        raise DataError('Nothing to report.')
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if reports.metrics:
        metrics = sorted(reports.metrics, key=lambda r: r.city_id)
        rows = [row for report in metrics for row in report.rows()]
        path = out_dir / 'metrics.csv'
        _write_csv(rows, ('city_id', 'outcome', 'fold', 'r2', 'nrmse'), path)
        write_json(summarize(metrics), out_dir / 'summary.json')
        written += [path, out_dir / 'summary.json']

    if reports.projections:
        projections = sorted(reports.projections,
                             key=lambda r: (r.city_id, r.scenario))
        rows = [row for result in projections for row in result.rows()]
        path = out_dir / 'projections.csv'
        _write_csv(rows, ('city_id', 'scenario', 'outcome', 'baseline_mean',
                          'projected_mean', 'pct_change'), path)
        summary_path = out_dir / 'projections_summary.json'
        write_json(_summarize_projections(reports), summary_path)
        written += [path, summary_path]

    if reports.totals:
        totals = sorted(reports.totals, key=lambda t: (
            t.city_id == AGGREGATE_ID, t.city_id, t.ssp, t.scenario))
        path = out_dir / 'totals.csv'
        _write_csv([t.row() for t in totals],
                   ('city_id', 'ssp', 'scenario', 'current_total_mwh',
                    'projected_total_mwh', 'delta_mwh', 'co2e_t', 'turbines',
                    'forest_km2', 'dam_days'), path)
        written.append(path)

    if reports.influence:
        rows = []
        for city_id in sorted(reports.influence):
            frame = reports.influence[city_id]
            for feature in frame.index:
                for outcome in frame.columns:
                    rows.append((city_id, feature, outcome,
                                 float(frame.at[feature, outcome])))
        path = out_dir / 'influence.csv'
        _write_csv(rows, ('city_id', 'feature', 'outcome',
                          'relative_influence_pct'), path)
        written.append(path)

    if reports.ranked:
        rows = []
        for (city_id, scenario), ranking in sorted(reports.ranked.items()):
            rows.extend((city_id, scenario, a.candidate_id, a.distance,
                         a.sigma, str(a.saturated).lower(), a.rank)
                        for a in ranking)
        path = out_dir / 'analogs_ranked.csv'
        _write_csv(rows, ('target_city_id', 'scenario', 'candidate_id',
                          'distance', 'sigma', 'saturated', 'rank'), path)
        written.append(path)

    if reports.covariance:
        rows = []
        for region in sorted(reports.covariance):
            frame = reports.covariance[region]
            rows.extend((region, *row) for row in frame.itertuples(
                index=False, name=None))
        path = out_dir / 'covariance_explained.csv'
        _write_csv(rows, ('region', 'feature', 'pair', 'covariance',
                          'pct'), path)
        written.append(path)
    return written


# Concurrency.


def map_cities(fn: Callable[[T], R], items: Mapping[str, T],
               jobs: int = 1) -> dict[str, R]:
    """Apply `fn` to independent per-city work items.

    With `jobs > 1` items run on a process pool, so `fn` and the items must
    be picklable. Results are keyed and ordered by city id.
    """
    keys = sorted(items)
    if jobs <= 1 or len(keys) <= 1:
        return {key: fn(items[key]) for key in keys}
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(fn, [items[key] for key in keys]))
    return dict(zip(keys, results))
