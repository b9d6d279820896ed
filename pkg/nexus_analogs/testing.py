"""Shared builders and base classes for tests."""

from functools import cache
from os import PathLike
from typing import Any, ClassVar, Mapping

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from nexus_analogs.config import Hyperparams, RunConfig, SynthConfig
from nexus_analogs.preprocess import DAILY_VARIABLES
from nexus_analogs.synth import SyntheticBundle, generate

__all__ = ('FAST_HYPER', 'ReferenceRegression', 'daily_frame',
           'fast_run_config', 'slow', 'small_bundle', 'small_synth_config')

slow = pytest.mark.slow

# Few shallow trees: enough signal for small synthetic bundles.
FAST_HYPER = Hyperparams(n_trees=60, depth=2, shrinkage=0.1)

DAILY_DEFAULTS = {'tdry': 20.0, 'twet': 15.0, 'tdew': 10.0, 'rh': 50.0,
                  'wind': 3.0, 'precip': 0.0}


def daily_frame(location_id: str = 'loc', start: str = '2010-01-01',
                days: int = 31, **values: Any) -> pd.DataFrame:
    """Daily climate of a location; every variable is a scalar or an array
    of `days` values and defaults to a mild constant.
    """
    dates = pd.date_range(start, periods=days, freq='D')
    frame = pd.DataFrame({'city_id': location_id, 'date': dates.date})
    for name in DAILY_VARIABLES:
        value = values.get(name, DAILY_DEFAULTS[name])
        frame[name] = np.broadcast_to(np.asarray(value, dtype=float),
                                      days).copy()
    return frame


def small_synth_config(**kwargs) -> SynthConfig:
    """Two cities over seven years, one per default region."""
    kwargs = {'n_cities': 2, 'start_year': 2007, 'end_year': 2013} | kwargs
    return SynthConfig(**kwargs)


@cache
def small_bundle(n_cities: int = 2, seed: int = 7) -> SyntheticBundle:
    """Cached small synthetic bundle; callers must not mutate it."""
    return generate(small_synth_config(n_cities=n_cities, seed=seed))


def fast_run_config(data_dir: PathLike | str, out_dir: PathLike | str,
                    **kwargs) -> RunConfig:
    """Run configuration matching `small_bundle` with `FAST_HYPER`."""
    kwargs = {'data_dir': str(data_dir), 'out_dir': str(out_dir),
              'study_start': 2007, 'study_end': 2013,
              'hyper': FAST_HYPER} | kwargs
    return RunConfig(**kwargs)


class ReferenceRegression:
    """A common type base for figures reproduced from published numbers.

    Subclasses name the figures and their published values in `reference`
    and compute them in `compute`.
    """

    reference: ClassVar[Mapping[str, float]] = {}

    rtol: ClassVar[float] = 0.02

    rtols: ClassVar[Mapping[str, float]] = {}

    @staticmethod
    def compute() -> Mapping[str, float]:
        raise NotImplementedError

    @classmethod
    def tolerance(cls, name: str) -> float:
        return cls.rtols.get(name, cls.rtol)

    def test_reference(self):
        cls = type(self)
        assert cls.reference, f'No reference figures in {cls.__name__}.'
        actual = cls.compute()
        missing = set(cls.reference) - set(actual)
        assert not missing, f'Figures not computed: {sorted(missing)}.'
        for name, expected in cls.reference.items():
            assert_allclose(actual[name], expected, rtol=cls.tolerance(name),
                            err_msg=name)
