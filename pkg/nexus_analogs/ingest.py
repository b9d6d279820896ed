"""Parsing, validation and serialization of the input tables.

All tables are UTF-8 CSV files with a mandatory header row. Lines starting
with `#` are comments. Every record invariant is checked at parse time so no
invalid record leaves this module; errors report the offending line number.
"""

import logging
import re
import warnings
from dataclasses import astuple, dataclass, field
from datetime import date
from functools import cached_property
from io import StringIO
from math import isnan
from os import PathLike
from pathlib import Path
from typing import IO, Any, Iterable, Literal, Sequence

import numpy as np
import pandas as pd

from nexus_analogs.analog import SEASON_COLUMNS, AnalogQuery
from nexus_analogs.config import NOAA_REGIONS, SCENARIOS
from nexus_analogs.errors import InputError, ParseError, UnknownRegionWarning

__all__ = ('AnalogMapRecord', 'CityCoverage', 'CityRecord',
           'ClimateDailyRecord', 'DatasetBundle', 'DemandRecord',
           'PopulationRecord', 'SSPRecord', 'ValidationReport',
           'load_bundle', 'parse_analog_csv', 'parse_climate_csv',
           'parse_demand_csv', 'parse_future_normals_csv',
           'parse_population_csv', 'parse_registry_csv', 'parse_ssp_csv',
           'summer_share', 'validate_bundle', 'write_analog_csv',
           'write_climate_csv', 'write_demand_csv',
           'write_future_normals_csv', 'write_population_csv',
           'write_registry_csv', 'write_ssp_csv')

logger = logging.getLogger(__name__)

Sector = Literal['water', 'electricity']

UNITS: dict[str, str] = {'water': 'm3', 'electricity': 'MWh'}

FLOAT_FORMAT = '%.10g'

REGISTRY_COLUMNS = ('city_id', 'name', 'state', 'lat', 'lon', 'region')
DEMAND_COLUMNS = ('city_id', 'sector', 'year', 'month', 'value', 'unit')
POPULATION_COLUMNS = ('city_id', 'sector', 'year', 'service_population')
CLIMATE_COLUMNS = ('city_id', 'date', 'tdry_c', 'twet_c', 'tdew_c', 'rh_pct',
                   'wind_ms', 'precip_mm')
ANALOG_COLUMNS = ('target_city_id', 'scenario', 'analog_id', 'source')
SSP_COLUMNS = ('city_id', 'ssp', 'year', 'population')
FUTURE_NORMALS_COLUMNS = ('city_id', 'scenario', *SEASON_COLUMNS)

RE_ISO_DATE = r'\d{4}-\d{2}-\d{2}'
RE_SOURCE = re.compile(r'^(ensemble|gcm:\S+)$')
RE_SSP = r'SSP[1-5]'
RE_LINE = re.compile(r'line (\d+)')


@dataclass(frozen=True, slots=True)
class CityRecord:

    city_id: str

    name: str

    state: str

    lat: float

    lon: float

    region: str


@dataclass(frozen=True, slots=True)
class DemandRecord:
    """Monthly consumption: m3 for water, MWh for electricity."""

    city_id: str

    sector: Sector

    year: int

    month: int

    value: float

    unit: str


@dataclass(frozen=True, slots=True)
class PopulationRecord:

    city_id: str

    sector: Sector

    year: int

    service_population: float


@dataclass(frozen=True, slots=True)
class ClimateDailyRecord:

    city_id: str

    date: date

    tdry: float

    twet: float

    tdew: float

    rh: float

    wind: float

    precip: float


@dataclass(frozen=True, slots=True)
class AnalogMapRecord:

    target_city_id: str

    scenario: str

    analog_id: str

    source: str

    line: int | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, slots=True)
class SSPRecord:

    city_id: str

    ssp: int

    year: int

    population: float


# Table reading helpers.


class Table:
    """String cells of a CSV table together with source line numbers."""

    def __init__(self, stream: IO[str] | IO[bytes], columns: Sequence[str],
                 source: str):
        self.source = source
        self.columns = tuple(columns)

        text = stream.read()
        if isinstance(text, bytes):
            text = text.decode('utf-8')
        text = text.removeprefix('\ufeff')

        kept: list[str] = []
        linenos: list[int] = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.lstrip().startswith('#'):
                continue
            kept.append(line)
            linenos.append(lineno)

        if not kept:
            raise ParseError('missing header row', source=source)
        header = tuple(col.strip() for col in kept[0].split(','))
        if header != self.columns:
            raise ParseError(f'expected header {",".join(self.columns)}, '
                             f'got {",".join(header)}', source=source,
                             line=linenos[0])

        try:
            frame = pd.read_csv(StringIO('\n'.join(kept)), dtype=str,
                                keep_default_na=False, skipinitialspace=True)
        except pd.errors.ParserError as e:
            line = None
            if (m := RE_LINE.search(str(e))) is not None:
                ix = int(m.group(1)) - 1
                line = linenos[ix] if ix < len(linenos) else None
            raise ParseError('malformed row: wrong number of fields',
                             source=source, line=line) from e

        self.lines = np.asarray(linenos[1:], dtype=int)
        missing = frame.isna().any(axis=1).to_numpy()
        self.fail(missing, 'malformed row: missing fields')
        self.frame = frame.apply(lambda col: col.str.strip())

    def __len__(self) -> int:
        return len(self.frame)

    def __getitem__(self, name: str) -> pd.Series:
        return self.frame[name]

    def fail(self, mask: np.ndarray, reason: str | Any):
        """Raise on the first row where `mask` holds."""
        if not (mask := np.asarray(mask, dtype=bool)).any():
            return
        ix = int(np.argmax(mask))
        message = reason(ix) if callable(reason) else reason
        raise ParseError(message, source=self.source, line=int(self.lines[ix]))

    def text(self, name: str) -> np.ndarray:
        values = self[name].to_numpy(dtype=object)
        self.fail(values == '', f'{name}: empty value')
        return values

    def number(self, name: str) -> np.ndarray:
        raw = self[name]
        values = pd.to_numeric(raw, errors='coerce').to_numpy(dtype=float)
        self.fail(~np.isfinite(values),
                  lambda ix: f'{name}: not a finite number {raw.iat[ix]!r}')
        return values

    def integer(self, name: str) -> np.ndarray:
        values = self.number(name)
        self.fail(values != np.round(values),
                  lambda ix: f'{name}: not an integer {self[name].iat[ix]!r}')
        return values.astype(np.int64)

    def choice(self, name: str, options: Iterable[str]) -> np.ndarray:
        values = self.text(name)
        options = tuple(options)
        valid = np.isin(values, options)
        self.fail(~valid, lambda ix: f'{name}: {values[ix]!r} is not one of '
                                     f'{", ".join(options)}')
        return values

    def unique(self, keys: Sequence[str], what: str = 'key'):
        dup = self.frame.duplicated(subset=list(keys)).to_numpy()

        def reason(ix: int) -> str:
            key = ', '.join(str(self[k].iat[ix]) for k in keys)
            return f'duplicate {what} ({key})'

        self.fail(dup, reason)


def _source(stream: IO[Any], source: str | None) -> str:
    return source or getattr(stream, 'name', None) or '<stream>'


def parse_demand_csv(stream: IO[str] | IO[bytes],
                     source: str | None = None) -> list[DemandRecord]:
    table = Table(stream, DEMAND_COLUMNS, _source(stream, source))
    city = table.text('city_id')
    sector = table.choice('sector', UNITS)
    year = table.integer('year')
    month = table.integer('month')
    table.fail((month < 1) | (month > 12),
               lambda ix: f'month out of range: {month[ix]}')
    value = table.number('value')
    table.fail(value < 0, lambda ix: f'negative consumption: {value[ix]}')
    unit = table.text('unit')
    expected = np.array([UNITS[s] for s in sector], dtype=object)
    table.fail(unit != expected,
               lambda ix: f'unit mismatch for sector {sector[ix]}: '
                          f'{unit[ix]} (expected {expected[ix]})')
    table.unique(('city_id', 'sector', 'year', 'month'))
    return [DemandRecord(*row) for row in zip(
        city, sector, year.tolist(), month.tolist(), value.tolist(), unit)]


def parse_climate_csv(stream: IO[str] | IO[bytes],
                      source: str | None = None) -> list[ClimateDailyRecord]:
    table = Table(stream, CLIMATE_COLUMNS, _source(stream, source))
    city = table.text('city_id')
    raw_date = table['date']
    iso = raw_date.str.fullmatch(RE_ISO_DATE).to_numpy(dtype=bool)
    dates = pd.to_datetime(raw_date.where(iso), format='%Y-%m-%d',
                           errors='coerce')
    table.fail(~iso | dates.isna().to_numpy(),
               lambda ix: f'date format: {raw_date.iat[ix]!r} is not an ISO '
                          'date (YYYY-MM-DD)')
    tdry = table.number('tdry_c')
    twet = table.number('twet_c')
    tdew = table.number('tdew_c')
    rh = table.number('rh_pct')
    table.fail((rh < 0) | (rh > 100),
               lambda ix: f'rh out of range [0, 100]: {rh[ix]}')
    wind = table.number('wind_ms')
    table.fail(wind < 0, lambda ix: f'negative wind speed: {wind[ix]}')
    precip = table.number('precip_mm')
    table.fail(precip < 0, lambda ix: f'negative precip: {precip[ix]}')
    table.fail(tdew > tdry,
               lambda ix: f'dew point {tdew[ix]} exceeds dry bulb {tdry[ix]}')
    table.unique(('city_id', 'date'))
    days = [ts.date() for ts in dates]
    return [ClimateDailyRecord(*row) for row in zip(
        city, days, tdry.tolist(), twet.tolist(), tdew.tolist(), rh.tolist(),
        wind.tolist(), precip.tolist())]


def parse_registry_csv(stream: IO[str] | IO[bytes],
                       source: str | None = None) -> list[CityRecord]:
    table = Table(stream, REGISTRY_COLUMNS, _source(stream, source))
    city = table.text('city_id')
    name = table.text('name')
    state = table.text('state')
    lat = table.number('lat')
    table.fail(np.abs(lat) > 90, lambda ix: f'lat out of range: {lat[ix]}')
    lon = table.number('lon')
    table.fail(np.abs(lon) > 180, lambda ix: f'lon out of range: {lon[ix]}')
    region = table.text('region')
    table.unique(('city_id',), 'city_id')
    for ix, code in enumerate(region):
        if code not in NOAA_REGIONS:
            warnings.warn(f'{table.source}:{table.lines[ix]}: unknown NOAA '
                          f'climate region {code!r} for city {city[ix]}.',
                          UnknownRegionWarning, stacklevel=2)
    return [CityRecord(*row) for row in zip(
        city, name, state, lat.tolist(), lon.tolist(), region)]


def parse_population_csv(stream: IO[str] | IO[bytes],
                         source: str | None = None) -> list[PopulationRecord]:
    table = Table(stream, POPULATION_COLUMNS, _source(stream, source))
    city = table.text('city_id')
    sector = table.choice('sector', UNITS)
    year = table.integer('year')
    pop = table.number('service_population')
    table.fail(pop <= 0,
               lambda ix: f'service_population must be positive: {pop[ix]}')
    table.unique(('city_id', 'sector', 'year'))
    return [PopulationRecord(*row) for row in zip(
        city, sector, year.tolist(), pop.tolist())]


def parse_analog_csv(stream: IO[str] | IO[bytes],
                     source: str | None = None) -> list[AnalogMapRecord]:
    table = Table(stream, ANALOG_COLUMNS, _source(stream, source))
    target = table.text('target_city_id')
    scenario = table.choice('scenario', SCENARIOS)
    analog = table.text('analog_id')
    origin = table.text('source')
    valid = np.array([RE_SOURCE.match(s) is not None for s in origin])
    table.fail(~valid, lambda ix: f'source must be ensemble or gcm:<name>: '
                                  f'{origin[ix]!r}')
    table.unique(('target_city_id', 'scenario', 'source'))
    return [AnalogMapRecord(*row) for row in zip(
        target, scenario, analog, origin, table.lines.tolist())]


def parse_ssp_csv(stream: IO[str] | IO[bytes],
                  source: str | None = None) -> list[SSPRecord]:
    table = Table(stream, SSP_COLUMNS, _source(stream, source))
    city = table.text('city_id')
    raw = table.text('ssp')
    valid = table['ssp'].str.fullmatch(RE_SSP).to_numpy(dtype=bool)
    table.fail(~valid, lambda ix: f'ssp out of range SSP1..SSP5: {raw[ix]!r}')
    ssp = [int(value[3:]) for value in raw]
    year = table.integer('year')
    pop = table.number('population')
    table.fail(pop <= 0, lambda ix: f'population must be positive: {pop[ix]}')
    table.unique(('city_id', 'ssp', 'year'))
    return [SSPRecord(*row) for row in zip(
        city, ssp, year.tolist(), pop.tolist())]


def parse_future_normals_csv(stream: IO[str] | IO[bytes],
                             source: str | None = None) -> list[AnalogQuery]:
    table = Table(stream, FUTURE_NORMALS_COLUMNS, _source(stream, source))
    city = table.text('city_id')
    scenario = table.choice('scenario', SCENARIOS)
    values = np.column_stack([table.number(col) for col in SEASON_COLUMNS])
    for ix, col in enumerate(SEASON_COLUMNS):
        if col.endswith('prcp_mm'):
            table.fail(values[:, ix] < 0,
                       lambda jx: f'{col}: negative precipitation')
    table.unique(('city_id', 'scenario'))
    return [AnalogQuery(target_city_id=c, scenario=s, future12=tuple(row))
            for c, s, row in zip(city, scenario, values.tolist())]


# Serializers.


def _write(frame: pd.DataFrame, stream: IO[str]):
    frame.to_csv(stream, index=False, float_format=FLOAT_FORMAT,
                 lineterminator='\n')


def _records_frame(records: Iterable[Any], columns: Sequence[str]):
    # Trailing fields beyond the table columns are bookkeeping.
    rows = [astuple(record)[:len(columns)] for record in records]
    return pd.DataFrame(rows, columns=list(columns))


def write_registry_csv(records: Iterable[CityRecord], stream: IO[str]):
    _write(_records_frame(records, REGISTRY_COLUMNS), stream)


def write_demand_csv(records: Iterable[DemandRecord], stream: IO[str]):
    _write(_records_frame(records, DEMAND_COLUMNS), stream)


def write_population_csv(records: Iterable[PopulationRecord],
                         stream: IO[str]):
    _write(_records_frame(records, POPULATION_COLUMNS), stream)


def write_climate_csv(records: Iterable[ClimateDailyRecord],
                      stream: IO[str]):
    frame = _records_frame(records, CLIMATE_COLUMNS)
    frame['date'] = [day.isoformat() for day in frame['date']]
    _write(frame, stream)


def write_analog_csv(records: Iterable[AnalogMapRecord], stream: IO[str]):
    _write(_records_frame(records, ANALOG_COLUMNS), stream)


def write_ssp_csv(records: Iterable[SSPRecord], stream: IO[str]):
    frame = _records_frame(records, SSP_COLUMNS)
    frame['ssp'] = [f'SSP{ssp}' for ssp in frame['ssp']]
    _write(frame, stream)


def write_future_normals_csv(queries: Iterable[AnalogQuery],
                             stream: IO[str]):
    rows = [(q.target_city_id, q.scenario, *q.future12) for q in queries]
    _write(pd.DataFrame(rows, columns=list(FUTURE_NORMALS_COLUMNS)), stream)


# Bundle assembly and validation.


@dataclass(frozen=True)
class DatasetBundle:
    """All parsed inputs of a run; tabular views are built lazily."""

    cities: list[CityRecord]

    demand: list[DemandRecord]

    population: list[PopulationRecord]

    climate: list[ClimateDailyRecord]

    analogs: list[AnalogMapRecord] = field(default_factory=list)

    future_normals: list[AnalogQuery] | None = None

    ssp: list[SSPRecord] | None = None

    @cached_property
    def registry(self) -> dict[str, CityRecord]:
        return {city.city_id: city for city in self.cities}

    @cached_property
    def demand_frame(self) -> pd.DataFrame:
        return _records_frame(self.demand, DEMAND_COLUMNS)

    @cached_property
    def population_frame(self) -> pd.DataFrame:
        return _records_frame(self.population, POPULATION_COLUMNS)

    @cached_property
    def climate_frame(self) -> pd.DataFrame:
        """Daily climate with columns named after record fields."""
        columns = ('city_id', 'date', 'tdry', 'twet', 'tdew', 'rh', 'wind',
                   'precip')
        frame = _records_frame(self.climate, columns)
        frame['date'] = pd.to_datetime(frame['date'])
        return frame

    def climate_for(self, location_id: str) -> pd.DataFrame:
        frame = self.climate_frame
        return frame[frame['city_id'] == location_id].reset_index(drop=True)

    @cached_property
    def climate_locations(self) -> tuple[str, ...]:
        return tuple(sorted({r.city_id for r in self.climate}))

    @property
    def demand_cities(self) -> tuple[str, ...]:
        return tuple(sorted({r.city_id for r in self.demand}))


BUNDLE_FILES = {
    'cities': ('cities.csv', parse_registry_csv, True),
    'demand': ('demand.csv', parse_demand_csv, True),
    'population': ('population.csv', parse_population_csv, True),
    'climate': ('climate.csv', parse_climate_csv, True),
    'analogs': ('analogs.csv', parse_analog_csv, False),
    'future_normals': ('future_normals.csv', parse_future_normals_csv, False),
    'ssp': ('ssp.csv', parse_ssp_csv, False),
}


def load_bundle(data_dir: PathLike | str) -> DatasetBundle:
    """Parse every known table found in `data_dir`."""
    data_dir = Path(data_dir)
    kwargs: dict[str, Any] = {}
    for key, (filename, parse, required) in BUNDLE_FILES.items():
        path = data_dir / filename
        if not path.exists():
            if required:
                raise InputError(f'Missing input table: {path}.')
            continue
        try:
            with open(path, encoding='utf-8') as fin:
                kwargs[key] = parse(fin, str(path))
        except OSError as e:
            raise InputError(f'Cannot read {path}: {e}') from e
        except UnicodeDecodeError as e:
            raise ParseError(f'not UTF-8: {e}', source=str(path)) from e
        logger.info('parsed %d rows from %s', len(kwargs[key]), path)
    kwargs.setdefault('analogs', [])
    return DatasetBundle(**kwargs)


@dataclass(frozen=True, slots=True)
class CityCoverage:
    """Data gaps of a single city over the study period."""

    city_id: str

    missing_demand: tuple[tuple[str, int, int], ...]

    missing_climate_days: tuple[str, ...]

    missing_population: tuple[tuple[str, int], ...]

    summer_coverage: dict[str, float]

    climate_coverage: float

    summer_share: dict[str, float]

    excluded: bool

    reasons: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            'city_id': self.city_id,
            'excluded': self.excluded,
            'reasons': list(self.reasons),
            'missing_demand': [list(gap) for gap in self.missing_demand],
            'missing_climate_days': list(self.missing_climate_days),
            'missing_population': [list(gap)
                                   for gap in self.missing_population],
            'summer_coverage': dict(sorted(self.summer_coverage.items())),
            'climate_coverage': self.climate_coverage,
            'summer_share': {k: None if isnan(v) else v
                             for k, v in sorted(self.summer_share.items())},
        }


@dataclass(frozen=True, slots=True)
class ValidationReport:

    study_period: tuple[int, int]

    cities: dict[str, CityCoverage]

    @property
    def excluded(self) -> list[str]:
        return sorted(k for k, v in self.cities.items() if v.excluded)

    @property
    def included(self) -> list[str]:
        return sorted(k for k, v in self.cities.items() if not v.excluded)

    def to_dict(self) -> dict[str, Any]:
        return {
            'study_period': list(self.study_period),
            'included': self.included,
            'excluded': self.excluded,
            'cities': {k: self.cities[k].to_dict()
                       for k in sorted(self.cities)},
        }


def summer_share(records: Iterable[DemandRecord],
                 summer_months: Iterable[int] = (6, 7, 8, 9),
                 years: Iterable[int] | None = None) -> float:
    """Fraction of consumption falling into summer months.

    Only complete years contribute, restricted to `years` when given, so
    that a partial year does not bias the share.
    """
    frame = _records_frame(records, DEMAND_COLUMNS)
    if years is not None:
        frame = frame[frame['year'].isin(list(years))]
    if frame.empty:
        return float('nan')
    counts = frame.groupby('year')['month'].transform('nunique')
    frame = frame[counts == 12]
    if frame.empty or (total := frame['value'].sum()) <= 0:
        return float('nan')
    summer = frame.loc[frame['month'].isin(list(summer_months)), 'value']
    return float(summer.sum() / total)


def validate_bundle(bundle: DatasetBundle, study_period: range, *,
                    summer_months: Sequence[int] = (6, 7, 8, 9),
                    demand_coverage: float = 0.8,
                    climate_coverage: float = 0.95) -> ValidationReport:
    """Report data gaps per city and flag cities unfit for modelling.

    A city is excluded when a sector has demand for fewer than
    `demand_coverage` of the study-period summer months, when climate covers
    fewer than `climate_coverage` of the study-period days, or when a
    study-period service population is missing. An analog assignment whose
    location has no climate rows is an input error.
    """
    locations = set(bundle.climate_locations)
    for rec in bundle.analogs:
        if rec.analog_id not in locations:
            raise ParseError(
                f'analog {rec.analog_id!r} of {rec.target_city_id} has no '
                'climate rows', source=BUNDLE_FILES['analogs'][0],
                line=rec.line)

    years = list(study_period)
    start = date(years[0], 1, 1)
    end = date(years[-1], 12, 31)
    all_days = pd.date_range(start, end, freq='D')
    months = [(y, m) for y in years for m in range(1, 13)]
    summer = [(y, m) for y, m in months if m in summer_months]

    demand_keys: dict[tuple[str, str], set[tuple[int, int]]] = {}
    demand_by_city: dict[tuple[str, str], list[DemandRecord]] = {}
    for rec in bundle.demand:
        demand_keys.setdefault((rec.city_id, rec.sector), set()).add(
            (rec.year, rec.month))
        demand_by_city.setdefault((rec.city_id, rec.sector), []).append(rec)

    pop_keys = {(r.city_id, r.sector, r.year) for r in bundle.population}

    climate_days: dict[str, set[date]] = {}
    for rec in bundle.climate:
        climate_days.setdefault(rec.city_id, set()).add(rec.date)

    city_ids = sorted(set(bundle.registry) | set(bundle.demand_cities))
    report: dict[str, CityCoverage] = {}
    for city in city_ids:
        reasons: list[str] = []
        missing_demand: list[tuple[str, int, int]] = []
        missing_pop: list[tuple[str, int]] = []
        coverage: dict[str, float] = {}
        shares: dict[str, float] = {}
        for sector in UNITS:
            present = demand_keys.get((city, sector), set())
            missing_demand.extend((sector, y, m) for y, m in months
                                  if (y, m) not in present)
            found = sum((y, m) in present for y, m in summer)
            coverage[sector] = found / len(summer)
            if coverage[sector] < demand_coverage:
                reasons.append(f'{sector} demand covers '
                               f'{coverage[sector]:.0%} of summer months')
            missing_pop.extend((sector, y) for y in years
                               if (city, sector, y) not in pop_keys)
            shares[sector] = summer_share(
                demand_by_city.get((city, sector), []), summer_months, years)
        if missing_pop:
            reasons.append(f'{len(missing_pop)} service population years '
                           'missing')

        days = climate_days.get(city, set())
        missing_days = [d.date().isoformat() for d in all_days
                        if d.date() not in days]
        climate_share = 1 - len(missing_days) / len(all_days)
        if climate_share < climate_coverage:
            reasons.append(f'climate covers {climate_share:.0%} of days')

        report[city] = CityCoverage(
            city_id=city,
            missing_demand=tuple(missing_demand),
            missing_climate_days=tuple(missing_days),
            missing_population=tuple(missing_pop),
            summer_coverage=coverage,
            climate_coverage=climate_share,
            summer_share=shares,
            excluded=bool(reasons),
            reasons=tuple(reasons),
        )
    return ValidationReport((years[0], years[-1]), report)
