import json
from pathlib import Path

import pandas as pd
import pytest

from nexus_analogs import cli
from nexus_analogs.cli import main, make_parser
from nexus_analogs.errors import DataError, UnknownRegionWarning
from nexus_analogs.mvtb import load_model, model_path

SMALL_CONFIG = {
    'study_start': 2007,
    'study_end': 2013,
    'synth': {'n_cities': 2, 'start_year': 2007, 'end_year': 2013},
    'hyper': {'n_trees': 60, 'depth': 2, 'shrinkage': 0.1},
}

CHAIN = ('synth', 'validate', 'train', 'evaluate', 'analogs', 'project',
         'totals')


def write_config(path: Path, **kwargs) -> Path:
    path.write_text(json.dumps(SMALL_CONFIG | kwargs))
    return path


def run(command: str, root: Path, *extra: str, config: Path | None = None,
        out: str = 'out') -> int:
    config = config or root / 'config.json'
    return main([command, '--config', str(config), '--data-dir',
                 str(root / 'data'), '--out', str(root / out), '--seed', '7',
                 '-q', *extra])


@pytest.fixture(scope='class')
def chain(tmp_path_factory: pytest.TempPathFactory):
    root = tmp_path_factory.mktemp('chain')
    write_config(root / 'config.json')
    codes = {}
    with pytest.MonkeyPatch.context() as mp:
        mp.delenv('NEXUS_ANALOGS_SEED', raising=False)
        mp.delenv('NEXUS_ANALOGS_JOBS', raising=False)
        for command in CHAIN:
            extra = ('--dump-tables', ) if command == 'train' else ()
            codes[command] = run(command, root, *extra)
    return root, codes


class TestChain:

    def test_exit_codes(self, chain):
        _, codes = chain
        assert codes == {command: 0 for command in CHAIN}

    def test_artifacts(self, chain):
        root, _ = chain
        out = root / 'out'
        names = {p.name for p in out.iterdir()}
        assert names >= {
            'validation.json', 'variables.json', 'models', 'tables',
            'metrics.csv', 'summary.json', 'influence.csv',
            'covariance_explained.csv', 'analogs_ranked.csv',
            'projections.csv', 'projections_summary.json', 'totals.csv'}
        assert (root / 'data' / 'ground_truth.json').exists()
        assert (out / 'tables' / 'features_enc00.csv').exists()
        assert (out / 'tables' / 'normals_enc00.csv').exists()

    def test_variables(self, chain):
        root, _ = chain
        variables = json.loads((root / 'out' / 'variables.json').read_text())
        assert variables['cities'] == {'enc00': 'ENC', 'sw00': 'SW'}
        for region in ('ENC', 'SW'):
            features = variables['regions'][region]['features']
            assert 4 <= len(features) <= 6
            model = load_model(model_path(root / 'out', region.lower() +
                                          '00'))
            assert model.feature_names == tuple(features)

    def test_metrics(self, chain):
        root, _ = chain
        metrics = pd.read_csv(root / 'out' / 'metrics.csv')
        assert sorted(set(metrics['city_id'])) == ['enc00', 'sw00']
        assert len(metrics) == 2 * (5 * 2 + 2)
        summary = json.loads((root / 'out' / 'summary.json').read_text())
        assert summary['n_cities'] == 2

    def test_analogs(self, chain):
        root, _ = chain
        ranked = pd.read_csv(root / 'out' / 'analogs_ranked.csv')
        best = ranked[ranked['rank'] == 1].set_index(['target_city_id',
                                                   'scenario'])
        assert best.loc[('enc00', 'rcp85'), 'candidate_id'] == 'enc00_a85'
        assert best.loc[('sw00', 'rcp45'), 'candidate_id'] == 'sw00_a45'
        assert set(ranked['candidate_id']) >= {'sw00', 'enc00_a45'}
        targets = ranked[ranked['candidate_id'] == ranked['target_city_id']]
        assert targets.empty

    def test_projections(self, chain):
        root, _ = chain
        projections = pd.read_csv(root / 'out' / 'projections.csv')
        assert len(projections) == 2 * 2 * 2
        hot = projections[(projections['scenario'] == 'rcp85') &
                          (projections['outcome'] == 'electricity')]
        assert (hot['pct_change'] > 0).all()

    def test_totals(self, chain):
        root, _ = chain
        totals = pd.read_csv(root / 'out' / 'totals.csv')
        assert len(totals) == 3 * 5 * 2
        assert list(totals['city_id'][-10:]) == ['all'] * 10
        cities = totals[totals['city_id'] != 'all']
        aggregate = totals[totals['city_id'] == 'all']
        by_key = cities.groupby(['ssp', 'scenario'])['delta_mwh'].sum()
        for row in aggregate.itertuples():
            assert row.delta_mwh == pytest.approx(
                by_key[row.ssp, row.scenario], rel=1e-5)
        assert set(totals['ssp']) == {f'SSP{i}' for i in range(1, 6)}


class TestExitCodes:

    @pytest.fixture(autouse=True)
    def clean_env(self, monkeypatch: pytest.MonkeyPatch):
        monkeypatch.delenv('NEXUS_ANALOGS_SEED', raising=False)
        monkeypatch.delenv('NEXUS_ANALOGS_JOBS', raising=False)

    @pytest.mark.parametrize('command', ['train', 'evaluate', 'project',
                                         'totals'])
    def test_missing_prerequisite(self, tmp_path: Path, command: str):
        write_config(tmp_path / 'config.json')
        assert run('synth', tmp_path) == 0
        assert run(command, tmp_path) == 4

    def test_analogs_need_future_normals(self, tmp_path: Path):
        write_config(tmp_path / 'config.json')
        assert run('synth', tmp_path) == 0
        (tmp_path / 'data' / 'future_normals.csv').unlink()
        assert run('analogs', tmp_path) == 4

    def test_missing_bundle(self, tmp_path: Path):
        write_config(tmp_path / 'config.json')
        assert run('validate', tmp_path) == 2

    @pytest.mark.parametrize('document', [
        '{"k_folds": 1}',
        '{"scenarios": ["rcp60"]}',
        '{"hyper": {"shrinkage": 2}}',
        '{"study_start": 2020, "study_end": 2010}',
        '[1, 2]',
        '{not json',
    ])
    def test_bad_config(self, tmp_path: Path, document: str):
        (tmp_path / 'config.json').write_text(document)
        assert run('validate', tmp_path) == 2

    def test_missing_config(self, tmp_path: Path):
        assert run('synth', tmp_path, config=tmp_path / 'absent.json') == 2

    def test_exclusions(self, tmp_path: Path):
        write_config(tmp_path / 'config.json')
        assert run('synth', tmp_path) == 0
        config = write_config(tmp_path / 'wide.json', study_end=2015)
        assert run('validate', tmp_path, config=config) == 3
        report = json.loads(
            (tmp_path / 'out' / 'validation.json').read_text())
        assert report['excluded'] == ['enc00', 'sw00']
        assert report['included'] == []

    def test_unknown_city(self, tmp_path: Path):
        write_config(tmp_path / 'config.json')
        assert run('synth', tmp_path) == 0
        assert run('validate', tmp_path) == 0
        assert run('train', tmp_path, '--city', 'nowhere') == 2
        assert run('analogs', tmp_path, '--city', 'nowhere') == 2

    def test_dangling_analog(self, tmp_path: Path):
        write_config(tmp_path / 'config.json')
        assert run('synth', tmp_path) == 0
        path = tmp_path / 'data' / 'analogs.csv'
        path.write_text(path.read_text().replace(',enc00_a85,', ',nowhere,'))
        assert run('validate', tmp_path) == 2

    def test_region_without_usable_city(self, tmp_path: Path,
                                        monkeypatch: pytest.MonkeyPatch):
        write_config(tmp_path / 'config.json')
        assert run('synth', tmp_path) == 0
        assert run('validate', tmp_path) == 0
        prepare = cli._prepare

        def prepare_enc_only(bundle, city_id, config):
            if city_id == 'sw00':
                raise DataError('No summer rows.')
            return prepare(bundle, city_id, config)

        monkeypatch.setattr(cli, '_prepare', prepare_enc_only)
        monkeypatch.setattr(cli, 'configure_logging', lambda verbosity: None)
        with pytest.warns(UnknownRegionWarning, match='SW'):
            assert run('train', tmp_path) == 0
        out = tmp_path / 'out'
        variables = json.loads((out / 'variables.json').read_text())
        assert list(variables['regions']) == ['ENC']
        assert variables['cities'] == {'enc00': 'ENC'}
        assert model_path(out, 'enc00').exists()
        assert not model_path(out, 'sw00').exists()


class TestParser:

    def test_repeated_city(self):
        args = make_parser().parse_args(['project', '--city', 'a', '--city',
                                         'b', '--scenario', 'rcp45'])
        assert args.city == ['a', 'b']
        assert args.scenario == 'rcp45'

    def test_unknown_scenario(self):
        with pytest.raises(SystemExit):
            make_parser().parse_args(['project', '--scenario', 'rcp60'])

    def test_command_required(self):
        with pytest.raises(SystemExit):
            make_parser().parse_args([])

    def test_epilog_lists_keys(self, capsys: pytest.CaptureFixture):
        with pytest.raises(SystemExit):
            make_parser().parse_args(['evaluate', '--help'])
        assert 'k_folds' in capsys.readouterr().out

    def test_common_flags_before_command(self):
        args = make_parser().parse_args(['--config', 'a.json', '--seed', '3',
                                         'synth'])
        assert (args.config, args.seed) == ('a.json', 3)

    def test_flag_after_command_wins(self):
        args = make_parser().parse_args(['--out', 'a', '-v', 'synth', '--out',
                                         'b'])
        assert args.out == 'b'
        assert args.verbose == 1

    def test_leading_config(self, tmp_path: Path):
        config = write_config(tmp_path / 'config.json')
        code = main(['--config', str(config), '-q', 'synth', '--data-dir',
                     str(tmp_path / 'data')])
        assert code == 0
        assert (tmp_path / 'data' / 'cities.csv').exists()
