#!/usr/bin/env python3

import logging

import pandas as pd

from nexus_analogs import (
    Hyperparams, SynthConfig, fit, prepare_city, project_with_analog)
from nexus_analogs.pipeline import location_features
from nexus_analogs.synth import generate

logging.basicConfig(level=logging.INFO)

years = range(2007, 2019)
synthetic = generate(SynthConfig(n_cities=4, seed=42))
bundle, truth = synthetic.bundle, synthetic.truth

rows = []
for city in bundle.cities:
    data = prepare_city(bundle, city.city_id, study_years=years)
    model = fit(data.table.X, data.table.Y, Hyperparams(n_trees=500))
    observed = data.table.frame.set_index(['year', 'month'])
    for scenario in ('rcp45', 'rcp85'):
        analog_id = truth.analogs[city.city_id, scenario]
        analog = location_features(bundle, analog_id, study_years=years)
        result = project_with_analog(model, observed, analog,
                                     city_id=city.city_id, scenario=scenario,
                                     analog_id=analog_id)
        for outcome, pct in result.pct_change.items():
            expected = truth.pct_change[city.city_id, scenario, outcome]
            rows.append((city.city_id, scenario, outcome, pct, expected))

frame = pd.DataFrame(rows, columns=['city_id', 'scenario', 'outcome',
                                    'pct_change', 'true_pct_change'])
frame.to_csv('synthetic-projection.csv', index=False, float_format='%.4f')
print(frame.to_string(index=False, float_format='{:.2f}'.format))
