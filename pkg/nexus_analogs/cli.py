"""Command-line interface of `nexus-analogs`.

Commands run the stages of the projection workflow one at a time and
communicate through files in the output directory:

    synth -> validate -> train -> evaluate
                               -> analogs -> project -> totals
"""

import json
import logging
import sys
import warnings
from argparse import (
    SUPPRESS, ArgumentParser, Namespace, RawDescriptionHelpFormatter)
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Sequence

import pandas as pd

from nexus_analogs.analog import rank_analogs
from nexus_analogs.config import SCENARIOS, Hyperparams, RunConfig
from nexus_analogs.errors import (
    DataError, InputError, NexusError, PrerequisiteError,
    UnknownRegionWarning)
from nexus_analogs.ingest import DatasetBundle, load_bundle, validate_bundle
from nexus_analogs.mvtb import (
    BoostedNexusModel, covariance_explained, fit, load_model, model_path,
    relative_influence, save_model)
from nexus_analogs.pipeline import (
    MetricsReport, Reports, aggregate_totals, city_totals,
    cross_validate_city, location_features, map_cities, prepare_city,
    project_with_analog, select_regional_variables, summer_per_capita,
    write_json, write_reports)
from nexus_analogs.preprocess import (
    SeasonalNormals, TrainingTable, demand_series, dump_normals,
    dump_training_table, seasonal_normals, to_per_capita)
from nexus_analogs.synth import generate, write_bundle

__all__ = ('main', 'make_parser')

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

# Configuration keys each command reads; listed in its help.
STUDY_KEYS = ('data_dir', 'out_dir', 'study_start', 'study_end',
              'summer_months')

FEATURE_KEYS = ('wet_day_threshold_mm', 'max_gap_days',
                'min_month_coverage')

COMMAND_KEYS: dict[str, tuple[str, ...]] = {
    'validate': (*STUDY_KEYS, 'demand_coverage', 'climate_coverage'),
    'train': (*STUDY_KEYS, *FEATURE_KEYS, 'min_training_rows',
              'min_normal_years', 'icv_floor', 'hyper', 'selection_min',
              'selection_max', 'selection_threshold', 'jobs', 'seed'),
    'evaluate': (*STUDY_KEYS, *FEATURE_KEYS, 'min_training_rows', 'hyper',
                 'k_folds', 'jobs', 'seed'),
    'analogs': (*STUDY_KEYS, *FEATURE_KEYS, 'min_normal_years', 'icv_floor',
                'sigma_cap', 'scenarios'),
    'project': (*STUDY_KEYS, *FEATURE_KEYS, 'min_training_rows',
                'scenarios', 'analog_source'),
    'totals': (*STUDY_KEYS, 'scenarios', 'emissions', 'ssp_base_year',
               'ssp_target_year'),
    'synth': ('data_dir', 'synth', 'seed'),
}


def configure_logging(verbosity: int):
    level = {-1: logging.WARNING, 0: logging.INFO}.get(
        max(min(verbosity, 1), -1), logging.DEBUG)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr,
                        force=True)
    logging.captureWarnings(True)


def load_config(args: Namespace) -> RunConfig:
    """Built-in defaults < config file < environment < flags."""
    config = RunConfig()
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise InputError(f'Missing config file: {path}.')
        if path.suffix == '.toml':
            config = RunConfig.from_toml(path)
        else:
            config = RunConfig.from_json(path)
    config = RunConfig.from_env(config)
    config = config.override(data_dir=args.data_dir, out_dir=args.out,
                             jobs=args.jobs)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _feature_kwargs(config: RunConfig) -> dict[str, Any]:
    return {'wet_threshold': config.wet_day_threshold_mm,
            'min_coverage': config.min_month_coverage,
            'max_gap': config.max_gap_days}


def _prepare(bundle: DatasetBundle, city_id: str,
             config: RunConfig) -> TrainingTable:
    data = prepare_city(bundle, city_id, study_years=config.study_years,
                        summer_months=config.summer_months,
                        min_rows=config.min_training_rows,
                        **_feature_kwargs(config))
    return data.table


def _normals(bundle: DatasetBundle, location_id: str,
             config: RunConfig) -> SeasonalNormals:
    return seasonal_normals(bundle.climate_for(location_id), location_id,
                            config.study_years,
                            min_years=config.min_normal_years,
                            icv_floor=config.icv_floor,
                            **_feature_kwargs(config))


def _read_json(path: Path, hint: str) -> dict[str, Any]:
    if not path.exists():
        raise PrerequisiteError(path, hint)
    try:
        with open(path, encoding='utf-8') as fin:
            return json.load(fin)
    except (OSError, json.JSONDecodeError) as e:
        raise InputError(f'Cannot read {path}: {e}') from e


def _select(cities: Sequence[str], only: Sequence[str] | None) -> list[str]:
    if not only:
        return sorted(cities)
    unknown = sorted(set(only) - set(cities))
    if unknown:
        raise InputError(f'Unknown or unusable cities: {", ".join(unknown)}.')
    return sorted(set(only))


def _scenarios(args: Namespace, config: RunConfig) -> tuple[str, ...]:
    return (args.scenario, ) if args.scenario else config.scenarios


def cmd_validate(config: RunConfig, args: Namespace) -> int:
    bundle = load_bundle(config.data_path)
    report = validate_bundle(bundle, config.study_years,
                             summer_months=config.summer_months,
                             demand_coverage=config.demand_coverage,
                             climate_coverage=config.climate_coverage)
    config.out_path.mkdir(parents=True, exist_ok=True)
    write_json(report.to_dict(), config.out_path / 'validation.json')
    for city in report.excluded:
        logger.warning('excluded city %s: %s', city,
                       '; '.join(report.cities[city].reasons))
    return 3 if report.excluded else 0


def _fit_city(item: tuple[TrainingTable, Hyperparams]) -> BoostedNexusModel:
    table, hyper = item
    return fit(table.X, table.Y, hyper)


def cmd_train(config: RunConfig, args: Namespace) -> int:
    validation = _read_json(config.out_path / 'validation.json',
                            'Run `nexus-analogs validate` first.')
    bundle = load_bundle(config.data_path)
    registry = bundle.registry
    included = [c for c in validation['included'] if c in registry]
    cities = _select(included, args.city)
    regions = sorted({registry[c].region for c in cities})

    reports = Reports(registry=registry)
    variables: dict[str, Any] = {'regions': {}, 'cities': {}}
    items: dict[str, tuple[TrainingTable, Hyperparams]] = {}
    for region in regions:
        members = [c for c in included if registry[c].region == region]
        tables: dict[str, TrainingTable] = {}
        for city in members:
            try:
                tables[city] = _prepare(bundle, city, config)
            except DataError as e:
                logger.warning('skip city %s: %s', city, e)
        try:
            selection = select_regional_variables(
                region, list(tables.values()), config.hyper,
                threshold=config.selection_threshold,
                bounds=(config.selection_min, config.selection_max))
        except DataError as e:
            warnings.warn(f'Skip region {region}: {e}', UnknownRegionWarning,
                          stacklevel=2)
            continue
        variables['regions'][region] = selection.to_dict()
        if selection.model is not None and selection.table is not None:
            reports.covariance[region] = covariance_explained(
                selection.model, selection.table.X, selection.table.Y)
        for city in cities:
            if city in tables and registry[city].region == region:
                variables['cities'][city] = region
                items[city] = (tables[city].select(selection.features),
                               config.hyper)
                if args.dump_tables:
                    _dump_tables(bundle, city, tables[city], config)

    if not items:
        raise DataError('No region has a usable city to train.')
    models = map_cities(_fit_city, items, config.jobs)
    (config.out_path / 'models').mkdir(parents=True, exist_ok=True)
    for city, model in models.items():
        save_model(model, model_path(config.out_path, city))
        reports.influence[city] = relative_influence(model)
        logger.info('saved model of %s (%d trees)', city, len(model.updates))
    write_json(variables, config.out_path / 'variables.json')
    write_reports(reports, config.out_path)
    return 0


def _dump_tables(bundle: DatasetBundle, city: str, table: TrainingTable,
                 config: RunConfig):
    tables_dir = config.out_path / 'tables'
    tables_dir.mkdir(parents=True, exist_ok=True)
    dump_training_table(table, tables_dir / f'features_{city}.csv')
    try:
        normals = _normals(bundle, city, config)
    except DataError as e:
        logger.warning('no normals for %s: %s', city, e)
        return
    dump_normals(normals, tables_dir / f'normals_{city}.csv')


def _cross_validate(item: tuple[TrainingTable, Hyperparams, int, int]
                    ) -> MetricsReport:
    table, hyper, k, seed = item
    return cross_validate_city(table, hyper, k, seed)


def cmd_evaluate(config: RunConfig, args: Namespace) -> int:
    variables = _read_json(config.out_path / 'variables.json',
                           'Run `nexus-analogs train` first.')
    bundle = load_bundle(config.data_path)
    cities = _select(list(variables['cities']), args.city)
    items = {}
    for city in cities:
        region = variables['cities'][city]
        features = variables['regions'][region]['features']
        table = _prepare(bundle, city, config).select(features)
        items[city] = (table, config.hyper, config.k_folds, config.seed)
    results = map_cities(_cross_validate, items, config.jobs)
    write_reports(Reports(metrics=list(results.values())), config.out_path)
    return 0


def cmd_analogs(config: RunConfig, args: Namespace) -> int:
    bundle = load_bundle(config.data_path)
    if bundle.future_normals is None:
        raise PrerequisiteError(config.data_path / 'future_normals.csv',
                                'Projected seasonal normals are required.')
    scenarios = _scenarios(args, config)
    queries = [q for q in bundle.future_normals if q.scenario in scenarios]
    targets = _select(sorted({q.target_city_id for q in queries}), args.city)
    queries = [q for q in queries if q.target_city_id in targets]

    pool = []
    for location in bundle.climate_locations:
        try:
            pool.append(_normals(bundle, location, config))
        except DataError as e:
            logger.warning('skip analog candidate %s: %s', location, e)

    reports = Reports()
    for query in sorted(queries, key=lambda q: (q.target_city_id,
                                                q.scenario)):
        candidates = [n for n in pool
                      if n.location_id != query.target_city_id]
        ranking = rank_analogs(query, candidates, config.sigma_cap)
        reports.ranked[query.target_city_id, query.scenario] = ranking
        best = ranking[0]
        logger.info('%s/%s: best analog %s (sigma %.3f)',
                    query.target_city_id, query.scenario, best.candidate_id,
                    best.sigma)
    write_reports(reports, config.out_path)
    return 0


def _analog_map(bundle: DatasetBundle, config: RunConfig,
                scenarios: Sequence[str]) -> dict[tuple[str, str], str]:
    mapping = {(r.target_city_id, r.scenario): r.analog_id
               for r in bundle.analogs
               if r.source == config.analog_source and r.scenario in scenarios}
    if mapping:
        return mapping
    ranked_path = config.out_path / 'analogs_ranked.csv'
    if not ranked_path.exists():
        raise PrerequisiteError(
            config.data_path / 'analogs.csv',
            f'No {config.analog_source} analog map rows; provide an analog '
            'map or run `nexus-analogs analogs` first.')
    ranked = pd.read_csv(ranked_path, dtype={'target_city_id': str,
                                             'candidate_id': str})
    best = ranked[(ranked['rank'] == 1) & ranked['scenario'].isin(scenarios)]
    return {(row.target_city_id, row.scenario): row.candidate_id
            for row in best.itertuples()}


def cmd_project(config: RunConfig, args: Namespace) -> int:
    variables = _read_json(config.out_path / 'variables.json',
                           'Run `nexus-analogs train` first.')
    cities = _select(list(variables['cities']), args.city)
    models = {}
    for city in cities:
        if not (path := model_path(config.out_path, city)).exists():
            raise PrerequisiteError(path, 'Run `nexus-analogs train` first.')
        models[city] = load_model(path)

    bundle = load_bundle(config.data_path)
    scenarios = _scenarios(args, config)
    mapping = _analog_map(bundle, config, scenarios)
    reports = Reports(registry=bundle.registry)
    for city in cities:
        table = _prepare(bundle, city, config)
        observed = table.frame.set_index(['year', 'month'])
        for scenario in scenarios:
            if (analog_id := mapping.get((city, scenario))) is None:
                logger.warning('no %s analog for %s', scenario, city)
                continue
            analog = location_features(bundle, analog_id,
                                       study_years=config.study_years,
                                       **_feature_kwargs(config))
            result = project_with_analog(models[city], observed, analog,
                                         city_id=city, scenario=scenario,
                                         analog_id=analog_id)
            reports.projections.append(result)
    if not reports.projections:
        raise DataError('No projection could be made: no analog matches the '
                        'selected cities and scenarios.')
    write_reports(reports, config.out_path)
    return 0


def cmd_totals(config: RunConfig, args: Namespace) -> int:
    projections_path = config.out_path / 'projections.csv'
    if not projections_path.exists():
        raise PrerequisiteError(projections_path,
                                'Run `nexus-analogs project` first.')
    bundle = load_bundle(config.data_path)
    if bundle.ssp is None:
        raise PrerequisiteError(config.data_path / 'ssp.csv',
                                'SSP population is required.')
    projections = pd.read_csv(projections_path, dtype={'city_id': str})
    projections = projections[
        (projections['outcome'] == 'electricity') &
        projections['scenario'].isin(_scenarios(args, config))]
    cities = _select(sorted(set(projections['city_id'])), args.city)

    populations: dict[str, dict[int, dict[int, float]]] = {}
    for rec in bundle.ssp:
        populations.setdefault(rec.city_id, {}).setdefault(
            rec.ssp, {})[rec.year] = rec.population

    base, target = config.ssp_base_year, config.ssp_target_year
    reports = Reports(registry=bundle.registry)
    for city in cities:
        rows = projections[projections['city_id'] == city]
        pct = dict(zip(rows['scenario'], rows['pct_change'].astype(float)))
        pops = {}
        for ssp, years in sorted(populations.get(city, {}).items()):
            if base not in years or target not in years:
                raise DataError(f'SSP{ssp} population of {city} lacks year '
                                f'{base} or {target}.')
            pops[ssp] = (years[base], years[target])
        if not pops:
            raise DataError(f'No SSP population for {city}.')
        series = demand_series(bundle.demand, city, 'electricity')
        values = {k: v for k, v in series.values.items()
                  if k[0] in config.study_years}
        per_capita = to_per_capita(replace(series, values=values),
                                   bundle.population)
        mean = summer_per_capita(per_capita, config.summer_months)
        reports.totals.extend(city_totals(city, pct, mean, pops,
                                          config.emissions))
    reports.totals.extend(aggregate_totals(reports.totals, config.emissions))
    write_reports(reports, config.out_path)
    return 0


def cmd_synth(config: RunConfig, args: Namespace) -> int:
    synthetic = generate(config.synth)
    write_bundle(synthetic, config.data_path)
    return 0


COMMANDS: dict[str, tuple[Callable[[RunConfig, Namespace], int], str]] = {
    'validate': (cmd_validate, 'check coverage of the input bundle'),
    'train': (cmd_train, 'select regional variables and fit city models'),
    'evaluate': (cmd_evaluate, 'cross-validate city models'),
    'analogs': (cmd_analogs, 'rank analog locations by sigma dissimilarity'),
    'project': (cmd_project, 'project summer demand with analog climate'),
    'totals': (cmd_totals, 'scale projections to SSP totals and emissions'),
    'synth': (cmd_synth, 'generate a synthetic input bundle'),
}


def _epilog(command: str) -> str:
    keys = COMMAND_KEYS[command]
    return 'config keys:\n  ' + '\n  '.join(keys)


ARG_DEFAULTS: dict[str, Any] = {
    'config': None, 'data_dir': None, 'out': None, 'jobs': None,
    'seed': None, 'verbose': 0, 'quiet': 0, 'city': None, 'scenario': None,
    'dump_tables': False,
}


def make_parser() -> ArgumentParser:
    # Common flags are accepted before and after the command; unset flags
    # stay absent so a value given after the command wins.
    common = ArgumentParser(add_help=False, argument_default=SUPPRESS)
    common.add_argument('--config', metavar='PATH',
                        help='JSON (or TOML) run configuration')
    common.add_argument('--data-dir', metavar='DIR',
                        help='input bundle directory')
    common.add_argument('--out', metavar='DIR', help='output directory')
    common.add_argument('--jobs', type=int, metavar='N',
                        help='number of worker processes')
    common.add_argument('--seed', type=int, help='seed of every stage')
    common.add_argument('-v', '--verbose', action='count',
                        help='more logging')
    common.add_argument('-q', '--quiet', action='count',
                        help='less logging')

    parser = ArgumentParser(prog='nexus-analogs', description=__doc__,
                            parents=[common],
                            formatter_class=RawDescriptionHelpFormatter)
    subparsers = parser.add_subparsers(dest='command', required=True)
    for name, (func, description) in COMMANDS.items():
        sub = subparsers.add_parser(
            name, help=description, description=description,
            epilog=_epilog(name), parents=[common],
            formatter_class=RawDescriptionHelpFormatter,
            argument_default=None)
        if name in ('train', 'evaluate', 'analogs', 'project', 'totals'):
            sub.add_argument('--city', action='append', metavar='ID',
                             help='restrict to a city (repeatable)')
        if name in ('analogs', 'project', 'totals'):
            sub.add_argument('--scenario', choices=SCENARIOS,
                             help='restrict to a scenario')
        if name == 'train':
            sub.add_argument('--dump-tables', action='store_true',
                             help='write intermediate tables to out/tables')
        sub.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    for name, value in ARG_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, value)
    configure_logging(args.verbose - args.quiet)
    try:
        config = load_config(args)
        return args.func(config, args)
    except NexusError as e:
        logger.error('%s', e)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
