import json
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from os import PathLike, getenv
from pathlib import Path
from tomllib import load as load_toml
from typing import IO, Any, ClassVar, Self

from nexus_analogs.errors import ConfigError

__all__ = ('EmissionsConfig', 'Hyperparams', 'NOAA_REGIONS', 'OUTCOMES',
           'PREFIX', 'RunConfig', 'SCENARIOS', 'SynthConfig', 'get_env_int')

PREFIX = 'NEXUS_ANALOGS_'

# NOAA climate regions of the contiguous United States.
NOAA_REGIONS = frozenset({
    'NE',   # Northeast
    'ENC',  # Upper Midwest (East North Central)
    'C',    # Ohio Valley (Central)
    'SE',   # Southeast
    'WNC',  # Northern Rockies and Plains (West North Central)
    'S',    # South
    'SW',   # Southwest
    'NW',   # Northwest
    'W',    # West
})

OUTCOMES = ('water', 'electricity')

SCENARIOS = ('rcp45', 'rcp85')


class LoaderMixin:
    """Construct dataclass configs from mappings, JSON or TOML documents."""

    nested: ClassVar[dict[str, type]] = {}

    @classmethod
    def from_dict(cls, obj: dict[str, Any], drop=False, prefix='') -> Self:
        input_keys: set[str] = set()
        prefix_len = len(prefix)
        for key in obj.keys():
            if not prefix:
                input_keys.add(key)
            elif prefix and key.startswith(prefix):
                input_keys.add(key[prefix_len:])
        valid_keys = {f.name for f in fields(cls)}
        kwargs = {k: obj[f'{prefix}{k}'] for k in valid_keys & input_keys}
        for name, nested_cls in cls.nested.items():
            if isinstance(value := kwargs.get(name), dict):
                kwargs[name] = nested_cls.from_dict(value)
        if drop:
            for key in input_keys - valid_keys:
                obj.pop(f'{prefix}{key}')
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f'Invalid {cls.__name__}: {e}') from e

    @classmethod
    def from_json(cls, path: PathLike | IO[str] | str) -> Self:
        if isinstance(path, str | PathLike):
            try:
                with open(path, encoding='utf-8') as fin:
                    return cls.from_json(fin)
            except OSError as e:
                raise ConfigError(f'Cannot read config {path}: {e}') from e
        try:
            obj = json.load(path)
        except json.JSONDecodeError as e:
            raise ConfigError(f'Malformed JSON config: {e}') from e
        if not isinstance(obj, dict):
            raise ConfigError('Config document must be a JSON object.')
        return cls.from_dict(obj)

    @classmethod
    def from_toml(cls, path: PathLike | IO[bytes] | str) -> Self:
        if isinstance(path, str | PathLike):
            with open(path, 'rb') as fin:
                return cls.from_toml(fin)
        else:
            return cls.from_dict(load_toml(path))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)  # type: ignore[call-overload]


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


@dataclass(frozen=True, slots=True)
class Hyperparams(LoaderMixin):
    """Multivariate tree boosting hyperparameters."""

    n_trees: int = 1000

    depth: int = 3

    shrinkage: float = 0.05

    bag_fraction: float = 0.5

    min_node: int = 5

    seed: int = 0

    def __post_init__(self):
        _require(self.n_trees >= 0, f'n_trees must be >= 0: {self.n_trees}.')
        _require(self.depth >= 1, f'depth must be >= 1: {self.depth}.')
        _require(0 < self.shrinkage <= 1,
                 f'shrinkage must be in (0, 1]: {self.shrinkage}.')
        _require(0 < self.bag_fraction <= 1,
                 f'bag_fraction must be in (0, 1]: {self.bag_fraction}.')
        _require(self.min_node >= 1,
                 f'min_node must be >= 1: {self.min_node}.')
        _require(0 <= self.seed < 2**64,
                 f'seed must fit 64 bits: {self.seed}.')


@dataclass(frozen=True, slots=True)
class EmissionsConfig(LoaderMixin):
    """Conversion factors from electricity deltas to emissions equivalences.

    Defaults are back-solved from published city-level figures and are meant
    to be overridden; they are not physical constants.
    """

    co2e_factor: float = 0.432  # t CO2e / MWh

    turbine_rating: float = 1.5  # MW

    capacity_factor: float = 0.247

    hours_per_month: float = 730.0

    forest_rate: float = 207.56  # t CO2e / km2 / month

    dam_daily_output: float = 11024.0  # MWh / day

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            _require(value > 0, f'{f.name} must be positive: {value}.')


@dataclass(frozen=True, slots=True)
class SynthConfig(LoaderMixin):
    """Synthetic bundle layout and ground-truth response parameters.

    `responses` maps region -> outcome -> term -> coefficient, where a term is
    a feature name or a product `a*b` of two feature names; `None` selects the
    built-in response table of `nexus_analogs.synth`.
    """

    n_cities: int = 8

    start_year: int = 2007

    end_year: int = 2018

    regions: tuple[str, ...] = ('ENC', 'SW')

    responses: dict[str, dict[str, dict[str, float]]] | None = None

    trend_rates: dict[str, float] = field(default_factory=lambda: {
        'water': -0.012, 'electricity': 0.008})

    noise_sigma: float = 0.05

    analog_warming_c: float = 3.0

    analog_precip_factor: float = 0.8

    moderate_fraction: float = 0.5

    summer_months: tuple[int, ...] = (6, 7, 8, 9)

    ssp_growth: tuple[float, ...] = (1.02, 1.08, 0.97, 1.05, 1.183)

    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, 'regions', tuple(self.regions))
        object.__setattr__(self, 'summer_months', tuple(self.summer_months))
        object.__setattr__(self, 'ssp_growth', tuple(self.ssp_growth))
        _require(self.n_cities >= 1, 'n_cities must be positive.')
        _require(self.start_year < self.end_year,
                 'start_year must precede end_year.')
        _require(len(self.regions) >= 1, 'at least one region is required.')
        _require(self.noise_sigma >= 0, 'noise_sigma must be non-negative.')
        _require(len(self.summer_months) >= 1,
                 'at least one summer month is required.')
        _require(set(self.summer_months) <= set(range(1, 13)),
                 'summer months must lie in 1..12.')
        _require(len(self.ssp_growth) == 5,
                 'ssp_growth needs one ratio per SSP1..SSP5.')
        _require(0 < self.analog_precip_factor,
                 'analog_precip_factor must be positive.')


@dataclass(frozen=True, slots=True)
class RunConfig(LoaderMixin):
    """Configuration of a command-line run.

    Every default named by the pipeline stages is a field here; a JSON config
    file overrides defaults and command-line flags override the file.
    """

    nested: ClassVar[dict[str, type]] = {
        'hyper': Hyperparams,
        'emissions': EmissionsConfig,
        'synth': SynthConfig,
    }

    data_dir: str = 'data'

    out_dir: str = 'out'

    study_start: int = 2007

    study_end: int = 2018

    summer_months: tuple[int, ...] = (6, 7, 8, 9)

    wet_day_threshold_mm: float = 1.0

    max_gap_days: int = 3

    min_month_coverage: float = 0.9

    demand_coverage: float = 0.8

    climate_coverage: float = 0.95

    min_training_rows: int = 24

    min_normal_years: int = 3

    icv_floor: float = 1e-6

    sigma_cap: float = 10.0

    hyper: Hyperparams = field(default_factory=Hyperparams)

    k_folds: int = 5

    selection_min: int = 4

    selection_max: int = 6

    selection_threshold: float = 90.0

    scenarios: tuple[str, ...] = SCENARIOS

    analog_source: str = 'ensemble'

    emissions: EmissionsConfig = field(default_factory=EmissionsConfig)

    ssp_base_year: int = 2020

    ssp_target_year: int = 2080

    synth: SynthConfig = field(default_factory=SynthConfig)

    seed: int = 2024

    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'summer_months', tuple(self.summer_months))
        object.__setattr__(self, 'scenarios', tuple(self.scenarios))
        _require(self.study_start <= self.study_end,
                 f'study_start {self.study_start} exceeds study_end '
                 f'{self.study_end}.')
        _require(len(self.summer_months) > 0
                 and set(self.summer_months) <= set(range(1, 13)),
                 f'summer_months must be within 1..12: {self.summer_months}.')
        _require(set(self.scenarios) <= set(SCENARIOS),
                 f'unknown scenario in {self.scenarios}.')
        for name in ('min_month_coverage', 'demand_coverage',
                     'climate_coverage'):
            value = getattr(self, name)
            _require(0 <= value <= 1, f'{name} must be in [0, 1]: {value}.')
        _require(self.wet_day_threshold_mm >= 0,
                 'wet_day_threshold_mm must be non-negative.')
        _require(self.max_gap_days >= 0, 'max_gap_days must be non-negative.')
        _require(self.k_folds >= 2, f'k_folds must be >= 2: {self.k_folds}.')
        _require(1 <= self.selection_min <= self.selection_max,
                 'selection bounds must satisfy 1 <= min <= max.')
        _require(0 < self.selection_threshold <= 100,
                 'selection_threshold is a percentage in (0, 100].')
        _require(self.icv_floor > 0, 'icv_floor must be positive.')
        _require(self.sigma_cap > 0, 'sigma_cap must be positive.')
        _require(self.min_normal_years >= 2,
                 'min_normal_years must be at least 2.')
        _require(self.jobs >= 1, f'jobs must be positive: {self.jobs}.')
        source = self.analog_source
        _require(source == 'ensemble' or
                 (source.startswith('gcm:') and len(source) > 4),
                 f'analog_source must be ensemble or gcm:<name>: {source}.')

    @property
    def data_path(self) -> Path:
        return Path(self.data_dir)

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    @property
    def study_years(self) -> range:
        return range(self.study_start, self.study_end + 1)

    def with_seed(self, seed: int) -> Self:
        """Reseed every stochastic stage at once."""
        return replace(self, seed=seed, hyper=replace(self.hyper, seed=seed),
                       synth=replace(self.synth, seed=seed))

    def override(self, **kwargs) -> Self:
        """Apply overrides whose value is not None."""
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs) if kwargs else self

    @classmethod
    def from_env(cls, base: Self | None = None) -> Self:
        """Apply `NEXUS_ANALOGS_*` environment defaults to a config."""
        config = (base or cls()).override(jobs=get_env_int('jobs'))
        if (seed := get_env_int('seed')) is not None:
            config = config.with_seed(seed)
        return config


def get_env_int(name: str) -> int | None:
    if (envvar := getenv(f'{PREFIX}{name.upper()}')) is None:
        return None
    try:
        return int(envvar)
    except ValueError:
        warnings.warn(f'Ignore malformed {PREFIX}{name.upper()}={envvar!r}: '
                      'integer expected.', RuntimeWarning)
        return None
