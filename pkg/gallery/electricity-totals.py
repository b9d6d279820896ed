#!/usr/bin/env python3

import pandas as pd

from nexus_analogs.pipeline import city_totals

# Summer electricity per capita (MWh/month) of a large city and its SSP
# population (present, 2080) in millions.
PER_CAPITA = 1.6
POPULATIONS = {1: (2.7, 2.75), 2: (2.7, 2.9), 3: (2.7, 2.6), 4: (2.7, 2.8),
               5: (2.7, 3.19)}

totals = city_totals('city', {'rcp45': 6.0, 'rcp85': 12.0}, PER_CAPITA,
                     {ssp: (now * 1e6, then * 1e6)
                      for ssp, (now, then) in POPULATIONS.items()})
frame = pd.DataFrame([t.row() for t in totals], columns=[
    'city_id', 'ssp', 'scenario', 'current_total_mwh', 'projected_total_mwh',
    'delta_mwh', 'co2e_t', 'turbines', 'forest_km2', 'dam_days'])
frame.to_csv('electricity-totals.csv', index=False, float_format='%.1f')
print(frame.drop(columns='city_id').to_string(index=False,
                                              float_format='{:,.0f}'.format))
