"""Centered auxiliary constraints built from predictions and covariates.

Two constructions are offered: a fixed polynomial basis in ``(Ytilde, X)``
centered by its pooled mean over all ``n + m`` rows, and a K-fold cross-fitted
learned auxiliary whose fold-``k`` values come from a learner that never saw
labeled fold ``k`` and are centered by the fold's own pooled mean.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from itertools import combinations_with_replacement
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import qr
from scipy.spatial import cKDTree

from .el_core import degenerate_columns
from .errors import InsufficientDataError, LearnerError, SchemaError
from .model import MomentModel, PPIDataset

log = logging.getLogger(__name__)

COLLINEAR_TOL = 1e-9
AUX_KINDS = ("none", "fixed_basis", "crossfit")
TARGETS = ("score", "indicator")


@dataclass(frozen=True)
class AuxSpec:
    """How to build the auxiliary block.

    ``kind`` is ``none``, ``fixed_basis`` (uses ``degree`` and
    ``include_interactions``) or ``crossfit`` (uses ``K``, ``learner``,
    ``learner_params`` and ``target``).  For ``target="indicator"`` the learned
    functions are ``E{I(Y <= y_j) | Ytilde, X}`` at ``grid``; a missing grid
    means the ``n_grid`` evenly spaced interior quantiles of the pooled predictions.
    """

    kind: str = "none"
    degree: int = 1
    include_interactions: bool = True
    K: int = 5
    learner: str = "ridge_poly"
    learner_params: dict = field(default_factory=dict)
    target: str = "score"
    grid: Optional[tuple] = None
    n_grid: int = 9

    def __post_init__(self):
        if self.kind not in AUX_KINDS:
            raise SchemaError(f"unknown aux kind {self.kind!r}")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.target not in TARGETS:
            raise SchemaError(f"unknown crossfit target {self.target!r}")
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = None if self.grid is None else list(self.grid)
        return out

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "AuxSpec":
        if not data:
            return cls()
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise SchemaError(f"unknown aux keys: {sorted(extra)}")
        return cls(**data)


@dataclass(frozen=True)
class AuxMatrix:
    """Centered auxiliary values for the labeled rows.

    ``hc_unlabeled`` holds the same centered functions on the unlabeled rows;
    it does not enter the likelihood but makes the centering auditable.
    """

    hc: np.ndarray
    dropped_columns: tuple = ()
    pooled_means: Optional[np.ndarray] = None
    fold_assignment: Optional[np.ndarray] = None
    unlabeled_fold_assignment: Optional[np.ndarray] = None
    hc_unlabeled: Optional[np.ndarray] = None
    kind: str = "fixed_basis"

    @property
    def r(self) -> int:
        return self.hc.shape[1]

    @property
    def n(self) -> int:
        return self.hc.shape[0]

    @classmethod
    def empty(cls, n: int, kind: str = "none") -> "AuxMatrix":
        return cls(hc=np.zeros((n, 0)), kind=kind)


# ------------------------------------------------------------------ bases

def monomial_exponents(n_vars: int, degree: int, include_interactions: bool = True):
    """Variable-index tuples for monomials of total degree ``1..degree``.

    Ordered by degree, then lexicographically by variable index.
    """
    out = []
    for deg in range(1, degree + 1):
        if include_interactions:
            out.extend(combinations_with_replacement(range(n_vars), deg))
        else:
            out.extend((j,) * deg for j in range(n_vars))
    return out


def monomials(features: np.ndarray, degree: int, include_interactions: bool = True) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    terms = monomial_exponents(features.shape[1], degree, include_interactions)
    out = np.empty((features.shape[0], len(terms)))
    for j, idx in enumerate(terms):
        col = features[:, idx[0]].copy()
        for k in idx[1:]:
            col *= features[:, k]
        out[:, j] = col
    return out


def build_basis(dataset: PPIDataset, degree: int, include_interactions: bool = True) -> np.ndarray:
    """Monomials of ``(Ytilde, X_1..X_d)`` of degree ``1..degree`` for all rows, labeled first.

    With interactions there are ``C(d + 1 + degree, degree) - 1`` columns.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    return monomials(dataset.features(), degree, include_interactions)


def _filter_columns(hc: np.ndarray, scale: np.ndarray):
    """Drop identically-zero columns, then exactly collinear ones."""
    r = hc.shape[1]
    dead = set(degenerate_columns(hc, scale).tolist())
    live = [j for j in range(r) if j not in dead]
    if len(live) > 1:
        sub = hc[:, live]
        sub = sub / np.sqrt(np.mean(sub * sub, axis=0))
        _, rr, piv = qr(sub, mode="economic", pivoting=True)
        diag = np.abs(np.diag(rr))
        rank = int(np.sum(diag > COLLINEAR_TOL * diag[0]))
        keep = sorted(live[p] for p in piv[:rank])
        dead |= set(live) - set(keep)
        live = keep
    return live, tuple(sorted(dead))


def _finish(hc, hc_unl, scale, kind, **extra) -> AuxMatrix:
    live, dropped = _filter_columns(hc, scale)
    if dropped:
        log.debug("aux columns dropped: %s", dropped)
    if not live:
        warnings.warn("every auxiliary column is degenerate; falling back to the supervised fit",
                      RuntimeWarning, stacklevel=3)
    return AuxMatrix(hc=hc[:, live], hc_unlabeled=hc_unl[:, live], dropped_columns=dropped,
                     kind=kind, **extra)


def center_pooled(raw: np.ndarray, n: int) -> AuxMatrix:
    """Subtract the mean over all ``n + m`` rows; keep the first ``n`` rows as ``hc``.

    Zero and exactly collinear columns are dropped and recorded.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim == 1:
        raw = raw[:, None]
    if not np.all(np.isfinite(raw)):
        raise ValueError("basis values contain non-finite entries")
    mean = raw.mean(axis=0)
    centered = raw - mean
    scale = np.max(np.abs(raw), axis=0) if raw.size else np.zeros(raw.shape[1])
    return _finish(centered[:n], centered[n:], scale, "fixed_basis", pooled_means=mean)


# --------------------------------------------------------------- learners

class RidgePoly:
    """Ridge regression on polynomial features of standardized inputs.

    The intercept is unpenalized; ``penalty`` defaults to ``1e-3 * n_train``.
    """

    def __init__(self, degree: int = 2, penalty: Optional[float] = None):
        self.degree = degree
        self.penalty = penalty

    def fit(self, features, responses):
        x = np.asarray(features, dtype=float)
        y = np.asarray(responses, dtype=float)
        y2 = y.reshape(len(y), -1)
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        phi = monomials((x - mu) / sd, self.degree)
        pm = phi.mean(axis=0)
        ym = y2.mean(axis=0)
        pc = phi - pm
        lam = 1e-3 * len(y) if self.penalty is None else self.penalty
        gram = pc.T @ pc + lam * np.eye(pc.shape[1])
        coef = np.linalg.solve(gram, pc.T @ (y2 - ym))
        return _LinearPredictor(mu, sd, pm, ym, coef, self.degree, y.ndim == 1)

    def __repr__(self):
        return f"RidgePoly(degree={self.degree}, penalty={self.penalty})"


class _LinearPredictor:
    def __init__(self, mu, sd, pm, ym, coef, degree, flat):
        self.mu, self.sd, self.pm, self.ym, self.coef = mu, sd, pm, ym, coef
        self.degree, self.flat = degree, flat

    def predict(self, features):
        phi = monomials((np.asarray(features, dtype=float) - self.mu) / self.sd, self.degree)
        out = (phi - self.pm) @ self.coef + self.ym
        return out[:, 0] if self.flat else out


class KNN:
    """k-nearest-neighbour average on standardized inputs."""

    def __init__(self, k: int = 5):
        self.k = k

    def fit(self, features, responses):
        x = np.asarray(features, dtype=float)
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        y = np.asarray(responses, dtype=float)
        return _KNNPredictor(cKDTree((x - mu) / sd), mu, sd, y, min(self.k, len(y)))

    def __repr__(self):
        return f"KNN(k={self.k})"


class _KNNPredictor:
    def __init__(self, tree, mu, sd, y, k):
        self.tree, self.mu, self.sd, self.y, self.k = tree, mu, sd, y, k

    def predict(self, features):
        _, idx = self.tree.query((np.asarray(features, dtype=float) - self.mu) / self.sd, k=self.k)
        idx = idx.reshape(len(idx), -1)
        return self.y[idx].mean(axis=1)


def make_learner(name: str, n: int, K: int, **params):
    """Instantiate a built-in learner with the default hyper-parameters for ``n`` rows."""
    if name == "ridge_poly":
        return RidgePoly(**params)
    if name == "knn":
        k = params.pop("k", max(5, math.ceil(n ** 0.6 / K)))
        return KNN(k=k, **params)
    raise SchemaError(f"unknown learner {name!r}; expected ridge_poly or knn")


# ------------------------------------------------------------ cross-fitting

def fold_labels(size: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random fold labels with sizes differing by at most one."""
    labels = np.empty(size, dtype=int)
    labels[rng.permutation(size)] = np.arange(size) % K
    return labels


def _crossfit(dataset: PPIDataset, responses: np.ndarray, learner, K: int, seed) -> AuxMatrix:
    n, m = dataset.n, dataset.m
    if n < 2 * K:
        raise InsufficientDataError(f"cross-fitting with K={K} needs n >= {2 * K}, got n={n}")
    if n % K or m % K:
        warnings.warn(f"K={K} does not divide n={n} and m={m}; using folds of unequal size",
                      RuntimeWarning, stacklevel=3)
    rng = np.random.default_rng(seed)
    lab_fold = fold_labels(n, K, rng)
    unl_fold = fold_labels(m, K, rng)
    feats = dataset.features()
    f_lab, f_unl = feats[:n], feats[n:]
    r = responses.shape[1]
    hc = np.empty((n, r))
    hc_unl = np.empty((m, r))
    means = np.empty((K, r))
    scale = np.zeros(r)
    for k in range(K):
        train = lab_fold != k
        in_l, in_u = lab_fold == k, unl_fold == k
        try:
            pred = learner.fit(f_lab[train], responses[train])
            p_l = np.asarray(pred.predict(f_lab[in_l]), dtype=float).reshape(in_l.sum(), r)
            p_u = np.asarray(pred.predict(f_unl[in_u]), dtype=float).reshape(in_u.sum(), r)
        except Exception as exc:  # noqa: BLE001 - any learner failure aborts with the fold index
            raise LearnerError(str(exc), fold=k) from exc
        if not (np.all(np.isfinite(p_l)) and np.all(np.isfinite(p_u))):
            raise LearnerError("non-finite predictions", fold=k)
        means[k] = np.concatenate([p_l, p_u]).mean(axis=0)
        hc[in_l] = p_l - means[k]
        hc_unl[in_u] = p_u - means[k]
        scale = np.maximum(scale, np.max(np.abs(p_l), axis=0))
    return _finish(hc, hc_unl, scale, "crossfit", pooled_means=means,
                   fold_assignment=lab_fold, unlabeled_fold_assignment=unl_fold)


def crossfit_aux(dataset: PPIDataset, model: MomentModel, theta_pilot, learner, K: int = 5,
                 seed=0) -> AuxMatrix:
    """Learn ``E{g_pilot(Y, X) | Ytilde, X}`` out-of-fold and center it per fold."""
    theta_pilot = np.asarray(theta_pilot, dtype=float)
    if not np.all(np.isfinite(theta_pilot)):
        raise ValueError("pilot estimate must be finite")
    responses = model.score(theta_pilot, dataset.labeled_y, dataset.labeled_x)
    return _crossfit(dataset, responses, learner, K, seed)


def default_grid(dataset: PPIDataset, n_grid: int = 9) -> np.ndarray:
    pooled = np.concatenate([dataset.labeled_ytilde, dataset.unlabeled_ytilde])
    return np.unique(np.quantile(pooled, np.arange(1, n_grid + 1) / (n_grid + 1)))


def indicator_targets(dataset: PPIDataset, grid: Sequence[float], learner, K: int = 5,
                      seed=0) -> AuxMatrix:
    """Cross-fitted learned ``E{I(Y <= y_j) | Ytilde, X}`` for each grid point."""
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be non-empty and strictly increasing")
    responses = (dataset.labeled_y[:, None] <= grid[None, :]).astype(float)
    return _crossfit(dataset, responses, learner, K, seed)


def build_aux(spec: AuxSpec, dataset: PPIDataset, model: Optional[MomentModel] = None,
              theta_pilot=None, seed=0) -> AuxMatrix:
    """Construct the auxiliary block described by ``spec``."""
    if spec.kind == "none":
        return AuxMatrix.empty(dataset.n)
    if spec.kind == "fixed_basis":
        return center_pooled(build_basis(dataset, spec.degree, spec.include_interactions), dataset.n)
    learner = make_learner(spec.learner, dataset.n, spec.K, **dict(spec.learner_params))
    if spec.target == "indicator":
        grid = spec.grid if spec.grid is not None else default_grid(dataset, spec.n_grid)
        return indicator_targets(dataset, grid, learner, spec.K, seed)
    if model is None or theta_pilot is None:
        raise ValueError("score cross-fitting needs a model and a pilot estimate")
    return crossfit_aux(dataset, model, theta_pilot, learner, spec.K, seed)
