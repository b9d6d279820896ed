"""Package `nexus_analogs` projects summer water and electricity demand of
cities under climate change.

A multivariate boosted tree model learns the joint response of both demands
to monthly climate features. Present-day climate of an analog location, one
whose current climate resembles the projected climate of a city, is then
substituted into the model.

.. code:: python

   from nexus_analogs import Hyperparams, fit, predict

   model = fit(table.X, table.Y, Hyperparams(n_trees=500))
   demand = predict(model, analog_features)

The whole workflow is available from the command line as well.

.. code:: shell

   nexus-analogs synth --data-dir data
   nexus-analogs validate --data-dir data --out out
   nexus-analogs train --data-dir data --out out
"""

from nexus_analogs.analog import (
    AnalogQuery, AnalogResult, rank_analogs, sed_distance,
    sigma_dissimilarity)
from nexus_analogs.config import (
    EmissionsConfig, Hyperparams, RunConfig, SynthConfig)
from nexus_analogs.errors import (
    ConfigError, DataError, InputError, NexusError, NumericError, ParseError,
    PrerequisiteError)
from nexus_analogs.ingest import DatasetBundle, load_bundle, validate_bundle
from nexus_analogs.mvtb import (
    BoostedNexusModel, covariance_explained, fit, load_model, predict,
    relative_influence, save_model)
from nexus_analogs.pipeline import (
    ProjectionResult, TotalsResult, cross_validate_city, prepare_city,
    project_with_analog, select_regional_variables)
from nexus_analogs.preprocess import (
    FEATURES, SeasonalNormals, TrainingTable, seasonal_normals)

__all__ = ('AnalogQuery', 'AnalogResult', 'BoostedNexusModel', 'ConfigError',
           'DataError', 'DatasetBundle', 'EmissionsConfig', 'FEATURES',
           'Hyperparams', 'InputError', 'NexusError', 'NumericError',
           'ParseError', 'PrerequisiteError', 'ProjectionResult', 'RunConfig',
           'SeasonalNormals', 'SynthConfig', 'TotalsResult', 'TrainingTable',
           'covariance_explained', 'cross_validate_city', 'fit',
           'load_bundle', 'load_model', 'predict', 'prepare_city',
           'project_with_analog', 'rank_analogs', 'relative_influence',
           'save_model', 'seasonal_normals', 'sed_distance',
           'select_regional_variables', 'sigma_dissimilarity',
           'validate_bundle')
