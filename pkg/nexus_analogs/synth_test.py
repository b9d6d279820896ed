from math import erf, sqrt

import numpy as np
import pytest
from numpy.testing import assert_allclose

from nexus_analogs.config import Hyperparams
from nexus_analogs.errors import ConfigError
from nexus_analogs.ingest import load_bundle, validate_bundle
from nexus_analogs.preprocess import FEATURES
from nexus_analogs.synth import (
    generate, load_ground_truth, oracle_chi, oracle_univariate_boost,
    write_bundle)
from nexus_analogs.testing import small_bundle, small_synth_config


class TestGenerate:

    def test_layout(self):
        synthetic = small_bundle()
        bundle = synthetic.bundle
        assert [c.city_id for c in bundle.cities] == ['enc00', 'sw00']
        assert [c.region for c in bundle.cities] == ['ENC', 'SW']
        locations = {r.city_id for r in bundle.climate}
        assert locations == {'enc00', 'enc00_a45', 'enc00_a85', 'sw00',
                             'sw00_a45', 'sw00_a85'}
        assert len(bundle.demand) == 2 * 2 * 7 * 12
        assert len(bundle.analogs) == 4
        assert len(bundle.future_normals) == 4
        assert {r.year for r in bundle.ssp} == {2020, 2080}
        assert {r.ssp for r in bundle.ssp} == {1, 2, 3, 4, 5}

    def test_validates(self):
        report = validate_bundle(small_bundle().bundle, range(2007, 2014))
        assert report.included == ['enc00', 'sw00']

    def test_deterministic(self):
        config = small_synth_config(n_cities=1, seed=3)
        a, b = generate(config), generate(config)
        assert a.bundle.demand == b.bundle.demand
        assert a.bundle.climate[:100] == b.bundle.climate[:100]
        assert a.truth.to_dict() == b.truth.to_dict()
        other = generate(small_synth_config(n_cities=1, seed=4))
        assert other.bundle.demand != a.bundle.demand

    def test_ground_truth(self):
        truth = small_bundle().truth
        assert truth.city_regions == {'enc00': 'ENC', 'sw00': 'SW'}
        assert truth.analogs['enc00', 'rcp85'] == 'enc00_a85'
        assert set(truth.true_features('ENC')) == {
            'tdry_max', 'precip_total', 'tdry_mean', 'rh_mean'}
        assert set(truth.true_features('ENC')) <= set(FEATURES)
        # Warmer and drier analogs raise demand in both regions.
        for city in ('enc00', 'sw00'):
            for outcome in ('water', 'electricity'):
                assert truth.pct_change[city, 'rcp85', outcome] > 0
                assert (truth.pct_change[city, 'rcp85', outcome] >
                        truth.pct_change[city, 'rcp45', outcome])

    def test_multiplicative_noise(self):
        clean = generate(small_synth_config(n_cities=1, noise_sigma=0.0))
        noisy = generate(small_synth_config(n_cities=1, noise_sigma=0.05))
        assert noisy.bundle.climate[:100] == clean.bundle.climate[:100]
        ratio = np.array([a.value / b.value for a, b in zip(
            noisy.bundle.demand, clean.bundle.demand)])
        assert len(ratio) == 2 * 7 * 12
        assert (ratio > 0).all()
        assert abs(ratio.mean() - 1) < 0.02
        assert 0 < ratio.std() < 0.1

    def test_unknown_region(self):
        with pytest.raises(ConfigError, match='ATL'):
            generate(small_synth_config(regions=('ATL', )))

    def test_unknown_feature(self):
        responses = {'ENC': {'water': {'snow_days': 0.1}}}
        with pytest.raises(ConfigError, match='snow_days'):
            generate(small_synth_config(regions=('ENC', ),
                                        responses=responses))


class TestWriteBundle:

    def test_write_bundle(self, tmp_path):
        synthetic = small_bundle()
        write_bundle(synthetic, tmp_path)
        names = {p.name for p in tmp_path.iterdir()}
        assert names == {'cities.csv', 'demand.csv', 'population.csv',
                         'climate.csv', 'analogs.csv', 'future_normals.csv',
                         'ssp.csv', 'ground_truth.json'}
        truth = load_ground_truth(tmp_path / 'ground_truth.json')
        assert truth == synthetic.truth.to_dict()
        assert truth['cities']['enc00']['analogs'] == {
            'rcp45': 'enc00_a45', 'rcp85': 'enc00_a85'}
        assert load_bundle(tmp_path).demand == synthetic.bundle.demand

    def test_byte_identical(self, tmp_path):
        write_bundle(small_bundle(), tmp_path / 'one')
        write_bundle(small_bundle(), tmp_path / 'two')
        for path in sorted((tmp_path / 'one').iterdir()):
            assert path.read_bytes() == (tmp_path / 'two' /
                                         path.name).read_bytes()


class TestOracles:

    def test_chi(self):
        assert oracle_chi(0.0, 12) == 0.0
        assert_allclose(oracle_chi(1.0, 1), 0.6826894921, atol=1e-10)
        assert_allclose(oracle_chi(2.0, 1), erf(2 / sqrt(2)), atol=1e-12)
        assert oracle_chi(8.0, 3) == pytest.approx(1.0)

    def test_univariate_boost_without_trees(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(20, 2))
        y = rng.normal(size=20)
        predicted = oracle_univariate_boost(X, y, Hyperparams(n_trees=0))
        assert_allclose(predicted, y.mean())

    def test_univariate_boost_learns(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(size=(200, 2))
        y = 5 * X[:, 0] + 0.1 * rng.normal(size=200)
        predicted = oracle_univariate_boost(
            X, y, Hyperparams(n_trees=200, shrinkage=0.1))
        residual = np.square(y - predicted).sum()
        assert residual < 0.1 * np.square(y - y.mean()).sum()
