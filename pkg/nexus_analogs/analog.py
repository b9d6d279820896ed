"""Climate analog search by sigma dissimilarity.

A target location's projected seasonal climate (12 values: minimum and
maximum temperature and total precipitation for four seasons) is compared to
the present-day climate of every candidate location. Anomalies are
standardized by the candidate's interannual variability, collapsed to a
Euclidean distance and mapped to the equivalent number of standard deviations
of a univariate normal.
"""

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from nexus_analogs.errors import DataError, NumericError

if TYPE_CHECKING:
    from nexus_analogs.preprocess import SeasonalNormals

__all__ = ('AnalogQuery', 'AnalogResult', 'SEASON_COLUMNS', 'SIGMA_CAP',
           'chi_cdf', 'chi_sf', 'gamma_p', 'gamma_q', 'rank_analogs',
           'sed_distance', 'sigma_dissimilarity', 'standardize_anomaly')

SEASONS = ('djf', 'mam', 'jja', 'son')

MEASURES = (('tmin', 'c'), ('tmax', 'c'), ('prcp', 'mm'))

# Season-major layout of the 12-value seasonal vector.
SEASON_COLUMNS = tuple(f'{season}_{measure}_{unit}' for season in SEASONS
                       for measure, unit in MEASURES)

SIGMA_CAP = 10.0

# Smallest upper tail probability that is still resolved.
TAIL_UNDERFLOW = 1e-300

SIGMA_TOL = 1e-10

EPS = float(np.finfo(float).eps)

TINY = 1e-300

MAX_ITER = 1000


@dataclass(frozen=True, slots=True)
class AnalogQuery:
    """Projected seasonal climate of a target city under a scenario."""

    target_city_id: str

    scenario: str

    future12: tuple[float, ...]

    def __post_init__(self):
        if len(self.future12) != len(SEASON_COLUMNS):
            raise DataError(f'Future normals of {self.target_city_id} need '
                            f'{len(SEASON_COLUMNS)} values, got '
                            f'{len(self.future12)}.')
        if not all(math.isfinite(v) for v in self.future12):
            raise DataError(f'Future normals of {self.target_city_id} '
                            'contain non-finite values.')


@dataclass(frozen=True, slots=True)
class AnalogResult:

    candidate_id: str

    distance: float

    sigma: float

    saturated: bool

    rank: int


def _gamma_series(a: float, x: float) -> float:
    """Lower regularized incomplete gamma by its power series (x < a + 1)."""
    if x == 0:
        return 0.0
    ap = a
    term = total = 1.0 / a
    for _ in range(MAX_ITER):
        ap += 1
        term *= x / ap
        total += term
        if abs(term) < abs(total) * EPS:
            break
    else:
        raise NumericError(f'Gamma series did not converge: a={a}, x={x}.')
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_fraction(a: float, x: float) -> float:
    """Upper regularized incomplete gamma by continued fraction (modified
    Lentz method, x >= a + 1).
    """
    b = x + 1 - a
    c = 1 / TINY
    d = 1 / b
    h = d
    for i in range(1, MAX_ITER):
        an = -i * (i - a)
        b += 2
        d = an * d + b
        if abs(d) < TINY:
            d = TINY
        c = b + an / c
        if abs(c) < TINY:
            c = TINY
        d = 1 / d
        delta = d * c
        h *= delta
        if abs(delta - 1) < EPS:
            break
    else:
        raise NumericError(f'Gamma fraction did not converge: a={a}, x={x}.')
    log_prefactor = -x + a * math.log(x) - math.lgamma(a)
    return math.exp(log_prefactor) * h


def gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma function P(a, x)."""
    if x < a + 1:
        return _gamma_series(a, x)
    return 1 - _gamma_fraction(a, x)


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x) = 1 - P(a, x)."""
    if x < a + 1:
        return 1 - _gamma_series(a, x)
    return _gamma_fraction(a, x)


def chi_cdf(x: float, k: int) -> float:
    """Cumulative distribution function of the chi distribution with `k`
    degrees of freedom.
    """
    if x <= 0:
        return 0.0
    return gamma_p(k / 2, x * x / 2)


def chi_sf(x: float, k: int) -> float:
    """Survival function (upper tail) of the chi distribution."""
    if x <= 0:
        return 1.0
    return gamma_q(k / 2, x * x / 2)


def standardize_anomaly(future12: Sequence[float],
                        candidate: 'SeasonalNormals') -> np.ndarray:
    future = np.asarray(future12, dtype=float)
    mean = np.asarray(candidate.mean12, dtype=float)
    icv = np.asarray(candidate.icv12, dtype=float)
    return (future - mean) / icv


def sed_distance(z: Sequence[float] | np.ndarray) -> float:
    """Standardized Euclidean distance of an anomaly vector."""
    return float(np.linalg.norm(np.asarray(z, dtype=float)))


def sigma_dissimilarity(distance: float, k: int = len(SEASON_COLUMNS),
                        cap: float = SIGMA_CAP) -> tuple[float, bool]:
    """Map a k-dimensional distance to its equivalent univariate sigma.

    Sigma is the 1-dof chi quantile of the percentile that `distance` attains
    under the k-dof chi distribution. Returns `(cap, True)` if the upper tail
    underflows or the equivalent sigma exceeds `cap`.
    """
    if distance < 0:
        raise DataError(f'Distance must be non-negative: {distance}.')
    if distance == 0:
        return 0.0, False

    tail = chi_sf(distance, k)
    if tail < TAIL_UNDERFLOW or chi_sf(cap, 1) > tail:
        return cap, True

    # Bisect on the smaller tail to keep relative precision at both ends.
    if tail < 0.5:
        def excess(sigma: float) -> float:
            return tail - chi_sf(sigma, 1)
    else:
        level = chi_cdf(distance, k)

        def excess(sigma: float) -> float:
            return chi_cdf(sigma, 1) - level

    lo, hi = 0.0, cap
    while hi - lo > SIGMA_TOL:
        mid = (lo + hi) / 2
        if excess(mid) < 0:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2, False


def rank_analogs(query: AnalogQuery,
                 pool: Iterable['SeasonalNormals'],
                 cap: float = SIGMA_CAP) -> list[AnalogResult]:
    """Rank candidate locations by sigma dissimilarity to a future climate.

    Ties in sigma are broken by candidate id so that the ranking is a total
    order.
    """
    scored: list[tuple[float, str, float, bool]] = []
    for candidate in pool:
        z = standardize_anomaly(query.future12, candidate)
        distance = sed_distance(z)
        sigma, saturated = sigma_dissimilarity(distance, z.size, cap)
        scored.append((sigma, candidate.location_id, distance, saturated))
    if not scored:
        raise DataError(f'Empty analog pool for {query.target_city_id}.')
    scored.sort(key=lambda item: (item[0], item[1]))
    return [AnalogResult(candidate_id=cid, distance=distance, sigma=sigma,
                         saturated=saturated, rank=rank)
            for rank, (sigma, cid, distance, saturated)
            in enumerate(scored, 1)]
