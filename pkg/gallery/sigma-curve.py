#!/usr/bin/env python3

import numpy as np
import pandas as pd

from nexus_analogs.analog import chi_sf, sigma_dissimilarity

distances = np.linspace(0, 12, 49)
rows = []
for k in (1, 4, 12):
    for distance in distances:
        sigma, saturated = sigma_dissimilarity(distance, k)
        rows.append((k, distance, chi_sf(distance, k), sigma, saturated))

frame = pd.DataFrame(rows, columns=['k', 'distance', 'tail_probability',
                                    'sigma', 'saturated'])
frame.to_csv('sigma-curve.csv', index=False, float_format='%.6g')
print(frame[frame['distance'].isin([1.0, 3.0, 6.0])].to_string(index=False))
