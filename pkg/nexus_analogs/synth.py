"""Seeded synthetic bundles with known ground truth and brute-force oracles.

A synthetic bundle has the layout of a real input directory: a city registry,
monthly demand, service population, daily climate of every city and of two
constructed analog locations per city, an analog map, projected seasonal
normals and SSP population. Demand is generated from a known response of the
monthly climate features, so every downstream estimate can be checked
against direct evaluation of that response.
"""

import json
import logging
from dataclasses import dataclass, field
from math import exp, log, sqrt
from os import PathLike
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd
from scipy.integrate import quad
from scipy.special import gammaln

from nexus_analogs.analog import AnalogQuery
from nexus_analogs.config import OUTCOMES, Hyperparams, SynthConfig
from nexus_analogs.errors import ConfigError
from nexus_analogs.ingest import (
    FLOAT_FORMAT, UNITS, AnalogMapRecord, CityRecord, ClimateDailyRecord,
    DatasetBundle, DemandRecord, PopulationRecord, SSPRecord,
    write_analog_csv, write_climate_csv, write_demand_csv,
    write_future_normals_csv, write_population_csv, write_registry_csv,
    write_ssp_csv)
from nexus_analogs.mvtb import draw_bag, fit_tree, make_rng
from nexus_analogs.preprocess import FEATURES, feature_table, seasonal_normals

__all__ = ('DEFAULT_RESPONSES', 'GroundTruth', 'SyntheticBundle', 'generate',
           'load_ground_truth', 'oracle_chi', 'oracle_univariate_boost',
           'write_bundle')

logger = logging.getLogger(__name__)

# Region: (mean temperature, seasonal amplitude, relative humidity, wind
# speed, wet-day probability, mean wet-day precipitation, lat, lon, state).
REGION_CLIMATE: dict[str, tuple] = {
    'NE': (9.0, 12.0, 68.0, 4.5, 0.33, 9.0, 42.0, -73.0, 'NY'),
    'ENC': (8.0, 14.0, 70.0, 4.8, 0.30, 8.0, 44.0, -88.0, 'WI'),
    'C': (12.0, 12.0, 70.0, 4.2, 0.32, 9.5, 39.0, -86.0, 'IN'),
    'SE': (19.0, 8.0, 74.0, 3.5, 0.30, 11.0, 32.0, -84.0, 'GA'),
    'WNC': (7.0, 15.0, 65.0, 5.5, 0.25, 7.0, 45.0, -100.0, 'ND'),
    'S': (19.0, 10.0, 66.0, 4.5, 0.22, 11.0, 31.0, -97.0, 'TX'),
    'SW': (17.0, 10.0, 35.0, 3.8, 0.12, 6.0, 34.0, -110.0, 'AZ'),
    'NW': (11.0, 8.0, 72.0, 3.5, 0.40, 6.0, 46.0, -122.0, 'WA'),
    'W': (16.0, 7.0, 60.0, 3.2, 0.18, 8.0, 36.0, -120.0, 'CA'),
}

# Per-capita demand level per unit response.
BASE_DEMAND = {'water': 8.0, 'electricity': 0.8}

# Region -> outcome -> term -> coefficient. Terms `a*b` are products.
DEFAULT_RESPONSES: dict[str, dict[str, dict[str, float]]] = {
    'ENC': {
        'water': {'tdry_max': 0.03, 'precip_total': -0.002},
        'electricity': {'tdry_mean': 0.02, 'tdry_mean*rh_mean': 0.0003},
    },
    'SW': {
        'water': {'tdry_max': 0.025, 'wind_mean': 0.02},
        'electricity': {'tdry_max': 0.03, 'tdry_max*rh_mean': 0.0002},
    },
}

WET_BULB_WEIGHT = 0.4

MAGNUS_A = 17.62

MAGNUS_B = 243.12


@dataclass(frozen=True, slots=True)
class GroundTruth:
    """Known generating process of a synthetic bundle."""

    responses: dict[str, dict[str, dict[str, float]]]

    city_regions: dict[str, str]

    analogs: dict[tuple[str, str], str]

    pct_change: dict[tuple[str, str, str], float] = field(
        default_factory=dict)

    seed: int = 0

    def true_features(self, region: str) -> tuple[str, ...]:
        names: set[str] = set()
        for terms in self.responses.get(region, {}).values():
            for term, coef in terms.items():
                if coef != 0:
                    names.update(term.split('*'))
        return tuple(sorted(names))

    def evaluate(self, region: str, outcome: str,
                 features: pd.DataFrame) -> np.ndarray:
        """Per-capita response of a region to monthly feature rows."""
        terms = self.responses.get(region, {}).get(outcome, {})
        linear = np.zeros(len(features))
        for term, coef in terms.items():
            value = np.ones(len(features))
            for name in term.split('*'):
                value = value * features[name].to_numpy(dtype=float)
            linear += coef * value
        return BASE_DEMAND[outcome] * np.exp(linear)

    def to_dict(self) -> dict[str, Any]:
        regions = sorted(set(self.city_regions.values()))
        cities: dict[str, Any] = {}
        for city, region in sorted(self.city_regions.items()):
            cities[city] = {
                'region': region,
                'analogs': {s: a for (c, s), a in sorted(self.analogs.items())
                            if c == city},
                'pct_change': {
                    s: {o: v for (c, s2, o), v in sorted(
                        self.pct_change.items()) if c == city and s2 == s}
                    for (c, s) in sorted(self.analogs) if c == city},
            }
        return {
            'seed': self.seed,
            'regions': {r: {'true_features': list(self.true_features(r)),
                            'responses': self.responses.get(r, {})}
                        for r in regions},
            'cities': cities,
        }


@dataclass(frozen=True)
class SyntheticBundle:

    bundle: DatasetBundle

    truth: GroundTruth


def _responses(config: SynthConfig) -> dict[str, dict[str, dict[str, float]]]:
    table = config.responses or DEFAULT_RESPONSES
    responses = {}
    for region in config.regions:
        if region not in REGION_CLIMATE:
            raise ConfigError(f'No synthetic climate for region {region!r}.')
        terms = table.get(region) or DEFAULT_RESPONSES['ENC']
        for outcome in OUTCOMES:
            for term in terms.get(outcome, {}):
                unknown = set(term.split('*')) - set(FEATURES)
                if unknown:
                    raise ConfigError(f'Unknown feature in response term '
                                      f'{term!r}: {", ".join(unknown)}.')
        responses[region] = {o: dict(terms.get(o, {})) for o in OUTCOMES}
    return responses


def _canonical(values: np.ndarray) -> list[float]:
    """Round to the precision of the CSV writers so that written and
    in-memory values agree.
    """
    return [float(FLOAT_FORMAT % v) for v in values]


@dataclass(frozen=True, slots=True)
class _Weather:
    """Random draws shared by a city and its analog locations."""

    month_temp: np.ndarray
    month_rh: np.ndarray
    month_wet: np.ndarray
    day_temp: np.ndarray
    day_rh: np.ndarray
    wind: np.ndarray
    wet: np.ndarray
    amount: np.ndarray


def _draw_weather(rng: np.random.Generator, n_months: int,
                  n_days: int) -> _Weather:
    return _Weather(month_temp=rng.normal(0, 1.2, n_months),
                    month_rh=rng.normal(0, 5, n_months),
                    month_wet=rng.normal(0, 0.25, n_months),
                    day_temp=rng.normal(0, 2, n_days),
                    day_rh=rng.normal(0, 8, n_days),
                    wind=rng.gamma(4, 0.25, n_days),
                    wet=rng.random(n_days),
                    amount=rng.exponential(1, n_days))


def _climate(location_id: str, days: pd.DatetimeIndex, month_ix: np.ndarray,
             weather: _Weather, climate: tuple, *, t_offset: float,
             warming: float = 0.0,
             precip_factor: float = 1.0) -> list[ClimateDailyRecord]:
    t_mean, t_amp, rh_base, wind_base, p_wet, amount, *_ = climate
    doy = days.dayofyear.to_numpy()
    seasonal = t_mean + t_offset - t_amp * np.cos(2 * np.pi * (doy - 16)
                                                  / 365.25)
    tdry = np.round(seasonal + weather.month_temp[month_ix] +
                    weather.day_temp + warming, 2)
    rh = np.round(np.clip(rh_base + weather.month_rh[month_ix] +
                          weather.day_rh, 5, 100), 2)
    gamma = np.log(rh / 100) + MAGNUS_A * tdry / (MAGNUS_B + tdry)
    tdew = np.round(np.minimum(MAGNUS_B * gamma / (MAGNUS_A - gamma), tdry),
                    2)
    twet = np.round(tdew + WET_BULB_WEIGHT * (tdry - tdew), 2)
    wind = np.round(wind_base * weather.wind, 2)
    wet_prob = np.clip(p_wet * (1 + weather.month_wet[month_ix]), 0.01, 0.95)
    precip = np.where(weather.wet < wet_prob,
                      weather.amount * amount * precip_factor, 0.0)
    precip = np.round(precip, 2)
    dates = [ts.date() for ts in days]
    return [ClimateDailyRecord(location_id, *row) for row in zip(
        dates, tdry.tolist(), twet.tolist(), tdew.tolist(), rh.tolist(),
        wind.tolist(), precip.tolist())]


def _frame(records: list[ClimateDailyRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [(r.city_id, r.date, r.tdry, r.twet, r.tdew, r.rh, r.wind, r.precip)
         for r in records],
        columns=['city_id', 'date', 'tdry', 'twet', 'tdew', 'rh', 'wind',
                 'precip'])


def generate(config: SynthConfig = SynthConfig()) -> SyntheticBundle:
    """Generate a bundle and its ground truth from `config`.

    Monthly demand is `population * c_y * g * (1 + noise)` where g is the
    regional response of the city's monthly features and c_y a per-year trend
    multiplier. The noise is a normal draw whose spread, relative to the
    summer mean of g, is `noise_sigma` times the summer standard deviation
    of g.
    """
    responses = _responses(config)
    years = range(config.start_year, config.end_year + 1)
    days = pd.date_range(f'{years.start}-01-01', f'{years.stop - 1}-12-31',
                         freq='D')
    month_ix = ((days.year - years.start) * 12 + days.month - 1).to_numpy()
    n_months = len(years) * 12
    middle = (years.start + years.stop - 1) / 2
    moderate = config.moderate_fraction
    shifts = {
        'rcp85': (config.analog_warming_c, config.analog_precip_factor),
        'rcp45': (moderate * config.analog_warming_c,
                  1 - moderate * (1 - config.analog_precip_factor)),
    }

    cities, demand, population, climate = [], [], [], []
    analogs, future, ssp = [], [], []
    truth = GroundTruth(responses, {}, {}, {}, config.seed)
    per_region: dict[str, int] = {}
    for index in range(config.n_cities):
        region = config.regions[index % len(config.regions)]
        number = per_region.get(region, 0)
        per_region[region] = number + 1
        city_id = f'{region.lower()}{number:02d}'
        truth.city_regions[city_id] = region
        rng = np.random.default_rng([config.seed, index])
        profile = REGION_CLIMATE[region]
        lat = round(profile[6] + rng.uniform(-2, 2), 4)
        lon = round(profile[7] + rng.uniform(-3, 3), 4)
        cities.append(CityRecord(city_id, f'Synthetic {region} {number}',
                                 profile[8], lat, lon, region))
        t_offset = rng.uniform(-1.5, 1.5)
        weather = _draw_weather(rng, n_months, len(days))

        observed = _climate(city_id, days, month_ix, weather, profile,
                            t_offset=t_offset)
        climate.extend(observed)
        features = feature_table(_frame(observed), city_id)
        summer = features[features.index.get_level_values('month')
                          .isin(config.summer_months)]

        # Service population.
        pop0 = round(rng.uniform(2e5, 3e6))
        growth = rng.uniform(0.005, 0.015)
        shares = {'water': 0.95, 'electricity': 1.0}
        for sector in UNITS:
            for year in years:
                value = round(pop0 * shares[sector] *
                              (1 + growth)**(year - years.start))
                population.append(PopulationRecord(city_id, sector, year,
                                                   float(value)))
        pops = {(r.sector, r.year): r.service_population
                for r in population if r.city_id == city_id}

        # Monthly demand.
        for sector in OUTCOMES:
            g = truth.evaluate(region, sector, features)
            g_summer = truth.evaluate(region, sector, summer)
            scale = float(g_summer.std())
            if scale <= 1e-9 * float(g_summer.mean()):
                scale = float(g_summer.mean())
            relative = config.noise_sigma * scale / float(g_summer.mean())
            noise = rng.normal(0, 1, len(features))
            rate = config.trend_rates.get(sector, 0.0)
            values = []
            for (year, _), g_value, eps in zip(features.index, g, noise):
                trend = exp(rate * (year - middle))
                pop = pops[sector, year]
                values.append(max(pop * trend * g_value * (1 + relative * eps),
                                  0.0))
            for (year, month), value in zip(features.index,
                                            _canonical(np.array(values))):
                demand.append(DemandRecord(city_id, sector, int(year),
                                           int(month), value, UNITS[sector]))

        # Constructed analogs share the weather draws of their target.
        for scenario, (warming, factor) in shifts.items():
            analog_id = f'{city_id}_a{scenario[3:]}'
            truth.analogs[city_id, scenario] = analog_id
            records = _climate(analog_id, days, month_ix, weather, profile,
                               t_offset=t_offset, warming=warming,
                               precip_factor=factor)
            climate.extend(records)
            analogs.append(AnalogMapRecord(city_id, scenario, analog_id,
                                           'ensemble'))
            normals = seasonal_normals(_frame(records), analog_id, years)
            future.append(AnalogQuery(city_id, scenario, tuple(
                _canonical(np.asarray(normals.mean12)))))
            analog_features = feature_table(_frame(records), analog_id)
            shifted = analog_features.loc[summer.index]
            for sector in OUTCOMES:
                base = truth.evaluate(region, sector, summer).mean()
                proj = truth.evaluate(region, sector, shifted).mean()
                truth.pct_change[city_id, scenario, sector] = float(
                    100 * (proj - base) / base)

        # SSP population at the base and target years.
        pop_now = round(pop0 * (1 + growth)**(2020 - years.start))
        for ssp_index, ratio in enumerate(config.ssp_growth, 1):
            ssp.append(SSPRecord(city_id, ssp_index, 2020, float(pop_now)))
            ssp.append(SSPRecord(city_id, ssp_index, 2080,
                                 float(round(pop_now * ratio))))
        logger.debug('generated city %s in region %s', city_id, region)

    bundle = DatasetBundle(cities=cities, demand=demand,
                           population=population, climate=climate,
                           analogs=analogs, future_normals=future, ssp=ssp)
    return SyntheticBundle(bundle, truth)


def write_bundle(synthetic: SyntheticBundle, data_dir: PathLike | str):
    """Write every table of a synthetic bundle plus `ground_truth.json`."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    bundle = synthetic.bundle
    writers = [
        ('cities.csv', write_registry_csv, bundle.cities),
        ('demand.csv', write_demand_csv, bundle.demand),
        ('population.csv', write_population_csv, bundle.population),
        ('climate.csv', write_climate_csv, bundle.climate),
        ('analogs.csv', write_analog_csv, bundle.analogs),
        ('future_normals.csv', write_future_normals_csv,
         bundle.future_normals or []),
        ('ssp.csv', write_ssp_csv, bundle.ssp or []),
    ]
    for filename, write, records in writers:
        with open(data_dir / filename, 'w', encoding='utf-8',
                  newline='') as fout:
            write(records, fout)
        logger.info('wrote %d rows to %s', len(records), data_dir / filename)
    with open(data_dir / 'ground_truth.json', 'w', encoding='utf-8') as fout:
        json.dump(synthetic.truth.to_dict(), fout, indent=2, sort_keys=True)
        fout.write('\n')


def oracle_univariate_boost(X: np.ndarray, y: np.ndarray,
                            hyper: Hyperparams = Hyperparams(),
                            X_new: np.ndarray | None = None) -> np.ndarray:
    """Plain least-squares gradient boosting of a single outcome.

    Uses the base learner, the bagging rule and the generator of `mvtb`, so
    its predictions are expected to match a single-outcome multivariate fit
    exactly.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    X_new = X if X_new is None else np.asarray(X_new, dtype=float)
    mu, sd = y.mean(), y.std()
    z = (y - mu) / sd
    rng = make_rng(hyper.seed)
    f = np.zeros_like(z)
    f_new = np.zeros(len(X_new))
    for _ in range(hyper.n_trees):
        bag = draw_bag(rng, len(y), hyper.bag_fraction)
        tree = fit_tree(X[bag], (z - f)[bag], hyper.depth, hyper.min_node)
        f += hyper.shrinkage * tree.predict(X)
        f_new += hyper.shrinkage * tree.predict(X_new)
    return mu + sd * f_new


def _chi_density(t: float, k: int) -> float:
    if t <= 0:
        return sqrt(2 / np.pi) if k == 1 and t == 0 else 0.0
    log_pdf = ((k - 1) * log(t) - t * t / 2 - (k / 2 - 1) * log(2) -
               gammaln(k / 2))
    return exp(log_pdf)


def oracle_chi(x: float, k: int) -> float:
    """Chi distribution CDF by adaptive quadrature of its density."""
    if x <= 0:
        return 0.0
    value, _ = quad(_chi_density, 0, x, args=(k, ), epsabs=1e-14,
                    epsrel=1e-13, limit=200)
    return min(value, 1.0)


def load_ground_truth(path: PathLike | str) -> Mapping[str, Any]:
    with open(path, encoding='utf-8') as fin:
        return json.load(fin)
