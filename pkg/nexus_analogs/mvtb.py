"""Multivariate tree boosting of the coupled water-electricity response.

Outcomes are standardized and share one iteration budget. At every iteration
a candidate regression tree is fit to the residuals of each outcome on a
common bag of rows; only the candidate that explains the most residual
covariance across all outcomes is added to the ensemble.
"""

import heapq
import json
import logging
from dataclasses import asdict, dataclass
from math import ceil
from os import PathLike
from pathlib import Path
from typing import IO, Any, Sequence

import numpy as np
import pandas as pd

from nexus_analogs.config import OUTCOMES, Hyperparams
from nexus_analogs.errors import DataError, InputError, NumericError

__all__ = ('BoostedNexusModel', 'IterationLog', 'MODEL_VERSION',
           'RegressionTree', 'TreeUpdate', 'covariance_explained',
           'draw_bag', 'fit', 'fit_tree', 'load_model', 'make_rng',
           'model_path', 'predict', 'relative_influence', 'save_model')

logger = logging.getLogger(__name__)

MODEL_VERSION = 1

LEAF = -1

# Relative gap under which split gains and selection scores are tied.
TIE_RTOL = 1e-9


def _first_near_max(values: np.ndarray) -> int:
    top = values.max()
    return int(np.argmax(values >= top - abs(top) * TIE_RTOL))


@dataclass(frozen=True, slots=True, eq=False)
class RegressionTree:
    """Binary regression tree stored as flat node arrays.

    Node 0 is the root. Internal nodes route `x[feature] <= threshold` to
    `left`; leaves have `feature == -1` and predict `value`. `gain` is the
    SSE reduction of a split (zero at leaves).
    """

    feature: np.ndarray

    threshold: np.ndarray

    left: np.ndarray

    right: np.ndarray

    value: np.ndarray

    gain: np.ndarray

    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int((self.feature == LEAF).sum())

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for node in range(self.n_nodes):
            if self.feature[node] != LEAF:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index of every row."""
        node = np.zeros(len(X), dtype=np.intp)
        active = np.flatnonzero(self.feature[node] != LEAF)
        while active.size:
            current = node[active]
            go_left = (X[active, self.feature[current]]
                       <= self.threshold[current])
            node[active] = np.where(go_left, self.left[current],
                                    self.right[current])
            active = active[self.feature[node[active]] != LEAF]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(np.asarray(X, dtype=float))]

    def to_dict(self) -> dict[str, list]:
        return {
            'feature': self.feature.tolist(),
            'threshold': self.threshold.tolist(),
            'left': self.left.tolist(),
            'right': self.right.tolist(),
            'value': self.value.tolist(),
            'gain': self.gain.tolist(),
            'n_samples': self.n_samples.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict[str, list]) -> 'RegressionTree':
        ints = ('feature', 'left', 'right', 'n_samples')
        return cls(**{key: np.asarray(obj[key], dtype=np.intp if key in ints
                                      else float)
                      for key in ('feature', 'threshold', 'left', 'right',
                                  'value', 'gain', 'n_samples')})


def _best_split(X: np.ndarray, r: np.ndarray,
                min_node: int) -> tuple[float, int, float] | None:
    """Exhaustive search of the split with the largest SSE reduction.

    Candidate thresholds are midpoints between consecutive distinct values.
    Gains within a relative `TIE_RTOL` of the best are ties; they resolve
    to the lowest feature index and then to the lowest threshold, so the
    choice does not depend on rounding in the residuals.
    """
    m, p = X.shape
    order = np.argsort(X, axis=0, kind='stable')
    xs = np.take_along_axis(X, order, axis=0)
    centered = r - r.mean()
    left_sum = np.cumsum(centered[order], axis=0)[:-1]
    n_left = np.arange(1, m, dtype=float)[:, None]
    n_right = m - n_left
    gains = left_sum**2 * (m / (n_left * n_right))

    valid = xs[:-1] < xs[1:]
    valid[:min_node - 1] = False
    valid[m - min_node:] = False
    gains = np.where(valid, gains, -np.inf).T  # Feature-major.
    if not np.isfinite(top := gains.max()) or top <= 0:
        return None
    feature, pos = divmod(_first_near_max(gains), m - 1)
    gain = float(gains[feature, pos])

    lo, hi = xs[pos, feature], xs[pos + 1, feature]
    threshold = lo + (hi - lo) / 2
    if not lo <= threshold < hi:
        threshold = lo
    return gain, feature, float(threshold)


def fit_tree(X: np.ndarray, r: np.ndarray, depth: int,
             min_node: int) -> RegressionTree:
    """Greedy best-first regression tree minimizing squared error.

    Each leaf holds at least `min_node` rows and predicts the mean residual
    of its rows. Constant or unsplittable residuals yield a single leaf.
    """
    X = np.asarray(X, dtype=float)
    r = np.asarray(r, dtype=float)
    # Node columns: feature, threshold, left, right, value, gain, n_samples.
    nodes: list[list[Any]] = []
    members: list[np.ndarray] = []

    def add_node(rows: np.ndarray) -> int:
        value = float(r[rows].mean()) if rows.size else 0.0
        nodes.append([LEAF, 0.0, LEAF, LEAF, value, 0.0, rows.size])
        members.append(rows)
        return len(nodes) - 1

    def propose(node: int, level: int):
        rows = members[node]
        if level >= depth or rows.size < 2 * min_node:
            return
        residuals = r[rows]
        sse = float(np.square(residuals - residuals.mean()).sum())
        if sse <= 1e-24 * max(1.0, float(np.square(residuals).sum())):
            return
        if (split := _best_split(X[rows], residuals, min_node)) is None:
            return
        gain, feature, threshold = split
        if gain <= 1e-12 * sse:
            return
        heapq.heappush(frontier, (-gain, node, level, feature, threshold))

    frontier: list[tuple[float, int, int, int, float]] = []
    root = add_node(np.arange(len(r)))
    propose(root, 0)
    while frontier:
        neg_gain, node, level, feature, threshold = heapq.heappop(frontier)
        rows = members[node]
        mask = X[rows, feature] <= threshold
        left = add_node(rows[mask])
        right = add_node(rows[~mask])
        nodes[node][:4] = [feature, threshold, left, right]
        nodes[node][5] = -neg_gain
        propose(left, level + 1)
        propose(right, level + 1)

    columns = list(zip(*nodes))
    return RegressionTree(
        feature=np.asarray(columns[0], dtype=np.intp),
        threshold=np.asarray(columns[1], dtype=float),
        left=np.asarray(columns[2], dtype=np.intp),
        right=np.asarray(columns[3], dtype=np.intp),
        value=np.asarray(columns[4], dtype=float),
        gain=np.asarray(columns[5], dtype=float),
        n_samples=np.asarray(columns[6], dtype=np.intp))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator shared by every stochastic step."""
    return np.random.Generator(np.random.PCG64(seed))


def draw_bag(rng: np.random.Generator, n: int,
             fraction: float) -> np.ndarray:
    """Sorted row indices of a bag drawn without replacement."""
    size = min(n, max(1, ceil(fraction * n)))
    return np.sort(rng.choice(n, size=size, replace=False))


@dataclass(frozen=True, slots=True)
class TreeUpdate:

    outcome: int

    shrinkage: float

    tree: RegressionTree


@dataclass(frozen=True, slots=True)
class IterationLog:
    """Selected outcome and selection scores of a boosting iteration."""

    iteration: int

    selected: int

    scores: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class BoostedNexusModel:

    feature_names: tuple[str, ...]

    outcome_names: tuple[str, ...]

    mean: tuple[float, ...]

    std: tuple[float, ...]

    hyper: Hyperparams

    updates: tuple[TreeUpdate, ...]

    log: tuple[IterationLog, ...]

    @property
    def n_outcomes(self) -> int:
        return len(self.outcome_names)

    def trees_per_outcome(self) -> list[int]:
        counts = [0] * self.n_outcomes
        for update in self.updates:
            counts[update.outcome] += 1
        return counts

    def to_dict(self) -> dict[str, Any]:
        return {
            'version': MODEL_VERSION,
            'feature_names': list(self.feature_names),
            'outcome_names': list(self.outcome_names),
            'mean': list(self.mean),
            'std': list(self.std),
            'hyper': asdict(self.hyper),
            'updates': [{'outcome': u.outcome, 'shrinkage': u.shrinkage,
                         'tree': u.tree.to_dict()} for u in self.updates],
            'log': [{'iteration': e.iteration, 'selected': e.selected,
                     'scores': list(e.scores)} for e in self.log],
        }


def _as_matrix(X: pd.DataFrame | np.ndarray,
               feature_names: Sequence[str] | None) -> tuple[np.ndarray,
                                                             tuple[str, ...]]:
    if isinstance(X, pd.DataFrame):
        names = tuple(feature_names or X.columns)
        missing = [name for name in names if name not in X.columns]
        if missing:
            raise DataError(f'Missing feature columns: {", ".join(missing)}.')
        return X[list(names)].to_numpy(dtype=float), names
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DataError(f'Feature matrix must be 2D, got shape {X.shape}.')
    names = tuple(feature_names or (f'x{i}' for i in range(X.shape[1])))
    if len(names) != X.shape[1]:
        raise DataError(f'Expected {len(names)} features, got {X.shape[1]}.')
    return X, names


def _covariance(a: np.ndarray, b: np.ndarray) -> float:
    """Covariance with 1/n normalization."""
    return float(np.dot(a - a.mean(), b - b.mean()) / a.size)


def fit(X: pd.DataFrame | np.ndarray, Y: pd.DataFrame | np.ndarray,
        hyper: Hyperparams = Hyperparams(), *,
        feature_names: Sequence[str] | None = None,
        outcome_names: Sequence[str] | None = None) -> BoostedNexusModel:
    """Fit a multivariate boosted ensemble.

    The selection score of outcome k is the sum over all outcomes j of the
    squared covariance between the residuals of j and the candidate tree of
    k. Scores within a relative `TIE_RTOL` of the best are ties and select
    the lowest outcome index.
    """
    X, features = _as_matrix(X, feature_names)
    if isinstance(Y, pd.DataFrame):
        outcome_names = tuple(outcome_names or Y.columns)
        Y = Y[list(outcome_names)].to_numpy(dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, q = Y.shape
    outcomes = tuple(outcome_names or OUTCOMES[:q])
    if len(outcomes) != q:
        raise DataError(f'Expected {q} outcome names, got {len(outcomes)}.')
    if len(X) != n:
        raise DataError(f'Features have {len(X)} rows, outcomes have {n}.')
    if n < 2 * hyper.min_node:
        raise DataError(f'Boosting needs at least {2 * hyper.min_node} rows, '
                        f'got {n}.')

    means, stds, Z = [], [], np.empty_like(Y)
    for k in range(q):
        column = Y[:, k]
        mean, std = column.mean(), column.std()
        if not np.isfinite(std) or std == 0:
            raise NumericError(f'Outcome {outcomes[k]} has zero variance.')
        Z[:, k] = (column - mean) / std
        means.append(float(mean))
        stds.append(float(std))

    rng = make_rng(hyper.seed)
    F = np.zeros_like(Z)
    updates: list[TreeUpdate] = []
    log: list[IterationLog] = []
    for it in range(hyper.n_trees):
        bag = draw_bag(rng, n, hyper.bag_fraction)
        R = Z - F
        candidates, fitted = [], []
        for k in range(q):
            tree = fit_tree(X[bag], R[bag, k], hyper.depth, hyper.min_node)
            candidates.append(tree)
            fitted.append(tree.predict(X))
        scores = tuple(sum(_covariance(R[:, j], fitted[k])**2
                           for j in range(q)) for k in range(q))
        selected = _first_near_max(np.asarray(scores))
        F[:, selected] += hyper.shrinkage * fitted[selected]
        updates.append(TreeUpdate(selected, hyper.shrinkage,
                                  candidates[selected]))
        log.append(IterationLog(it, selected, scores))
        logger.debug('iteration %d: selected %s, scores %s', it,
                     outcomes[selected], scores)

    return BoostedNexusModel(features, outcomes, tuple(means), tuple(stds),
                             hyper, tuple(updates), tuple(log))


def _raw_scores(model: BoostedNexusModel, X: np.ndarray) -> np.ndarray:
    scores = np.zeros((len(X), model.n_outcomes))
    for update in model.updates:
        scores[:, update.outcome] += update.shrinkage * update.tree.predict(X)
    return scores


def predict(model: BoostedNexusModel,
            X_new: pd.DataFrame | np.ndarray) -> np.ndarray:
    """Destandardized predictions, one column per outcome."""
    X, _ = _as_matrix(X_new, model.feature_names)
    scores = _raw_scores(model, X)
    out = np.empty_like(scores)
    for k in range(model.n_outcomes):
        out[:, k] = model.mean[k] + model.std[k] * scores[:, k]
    return out


def relative_influence(model: BoostedNexusModel) -> pd.DataFrame:
    """Percent share of split SSE reduction per (feature, outcome)."""
    influence = np.zeros((len(model.feature_names), model.n_outcomes))
    for update in model.updates:
        tree = update.tree
        internal = tree.feature != LEAF
        np.add.at(influence[:, update.outcome], tree.feature[internal],
                  tree.gain[internal])
    totals = influence.sum(axis=0)
    with np.errstate(invalid='ignore', divide='ignore'):
        influence = np.where(totals > 0, 100 * influence / totals, 0.0)
    return pd.DataFrame(influence, index=list(model.feature_names),
                        columns=list(model.outcome_names))


def _pair_label(model: BoostedNexusModel, a: int, b: int) -> str:
    return f'{model.outcome_names[a]}:{model.outcome_names[b]}'


def covariance_explained(model: BoostedNexusModel,
                         X: pd.DataFrame | np.ndarray,
                         Y: pd.DataFrame | np.ndarray) -> pd.DataFrame:
    """Attribute the selection scores of the ensemble to features.

    The training run is replayed on (X, Y). The squared covariance between
    the residuals of outcome j and the selected tree of outcome k is credited
    to the outcome pair (k, j) in sorted order and split among the features
    the tree splits on in proportion to their SSE reduction.

    Columns: `feature`, `pair`, `covariance`, `pct` (of the table total).
    """
    columns = ['feature', 'pair', 'covariance', 'pct']
    if not model.updates:
        return pd.DataFrame(columns=columns)
    X, _ = _as_matrix(X, model.feature_names)
    if isinstance(Y, pd.DataFrame):
        Y = Y[list(model.outcome_names)].to_numpy(dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
    Z = (Y - np.asarray(model.mean)) / np.asarray(model.std)

    q = model.n_outcomes
    pairs = [(a, b) for a in range(q) for b in range(a, q)]
    pair_index = {pair: i for i, pair in enumerate(pairs)}
    credit = np.zeros((len(model.feature_names), len(pairs)))
    F = np.zeros_like(Z)
    for update in model.updates:
        k, tree = update.outcome, update.tree
        fitted = tree.predict(X)
        internal = tree.feature != LEAF
        share = np.zeros(len(model.feature_names))
        np.add.at(share, tree.feature[internal], tree.gain[internal])
        if (total := share.sum()) > 0:
            share /= total
            for j in range(q):
                term = _covariance(Z[:, j] - F[:, j], fitted)**2
                pair = pair_index[min(k, j), max(k, j)]
                credit[:, pair] += share * term
        F[:, k] += update.shrinkage * fitted

    total = credit.sum()
    rows = []
    for f, feature in enumerate(model.feature_names):
        for (a, b), i in pair_index.items():
            pct = 100 * credit[f, i] / total if total > 0 else 0.0
            rows.append((feature, _pair_label(model, a, b), credit[f, i],
                         pct))
    return pd.DataFrame(rows, columns=columns)


def save_model(model: BoostedNexusModel, path: PathLike | IO[str] | str):
    """Write a versioned JSON document of a fitted model."""
    if isinstance(path, str | PathLike):
        with open(path, 'w', encoding='utf-8') as fout:
            return save_model(model, fout)
    json.dump(model.to_dict(), path, sort_keys=True)
    path.write('\n')


def load_model(path: PathLike | IO[str] | str) -> BoostedNexusModel:
    if isinstance(path, str | PathLike):
        try:
            with open(path, encoding='utf-8') as fin:
                return load_model(fin)
        except OSError as e:
            raise InputError(f'Cannot read model {path}: {e}') from e
    try:
        obj = json.load(path)
    except json.JSONDecodeError as e:
        raise InputError(f'Malformed model document: {e}') from e
    if not isinstance(obj, dict):
        raise InputError('Model document must be a JSON object.')
    if (version := obj.get('version')) != MODEL_VERSION:
        raise InputError(f'Unsupported model version: {version}.')
    try:
        updates = tuple(TreeUpdate(u['outcome'], u['shrinkage'],
                                   RegressionTree.from_dict(u['tree']))
                        for u in obj['updates'])
        log = tuple(IterationLog(e['iteration'], e['selected'],
                                 tuple(e['scores'])) for e in obj['log'])
        return BoostedNexusModel(
            feature_names=tuple(obj['feature_names']),
            outcome_names=tuple(obj['outcome_names']),
            mean=tuple(obj['mean']),
            std=tuple(obj['std']),
            hyper=Hyperparams.from_dict(obj['hyper']),
            updates=updates,
            log=log)
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f'Malformed model document: {e!r}') from e


def model_path(out_dir: PathLike | str, city_id: str) -> Path:
    return Path(out_dir) / 'models' / f'{city_id}.json'
