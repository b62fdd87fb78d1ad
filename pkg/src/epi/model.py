"""Estimating-equation models, the labeled/unlabeled dataset, and run configuration.

Score callbacks are vectorized over observations: ``g(theta, y, x)`` takes a
parameter vector of length ``p``, responses of shape ``(n,)`` and covariates of
shape ``(n, d)`` and returns an ``(n, q)`` array; the Jacobian callback returns
``(n, q, p)``.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InsufficientDataError, ParseError, SchemaError

ScoreFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def finite_difference_jacobian(g: ScoreFn, theta, y, x) -> np.ndarray:
    """Central-difference Jacobian of a vectorized score, shape ``(n, q, p)``.

    The step for coordinate k is ``1e-6 * (1 + |theta_k|)``.
    """
    theta = np.asarray(theta, dtype=float)
    cols = []
    for k in range(theta.size):
        step = 1e-6 * (1.0 + abs(theta[k]))
        up, down = theta.copy(), theta.copy()
        up[k] += step
        down[k] -= step
        cols.append((np.asarray(g(up, y, x)) - np.asarray(g(down, y, x))) / (2 * step))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class MomentModel:
    """A parametric estimating function ``g_theta(y, x)`` with ``E g = 0`` at the target.

    Attributes
    ----------
    p, q : int
        Parameter and moment dimensions, ``q >= p``.
    eval_g : callable
        Vectorized score, ``(theta, y, x) -> (n, q)``.
    eval_jacobian : callable or None
        Vectorized derivative ``(theta, y, x) -> (n, q, p)``. When omitted a
        central finite difference of ``eval_g`` is used.
    lower, upper : sequence of float or None
        Optional box constraints on theta; optimizers project into the box.
    init : callable or None
        ``(y, x) -> theta`` giving a supervised starting value.
    """

    p: int
    q: int
    eval_g: ScoreFn
    eval_jacobian: Optional[ScoreFn] = None
    lower: Optional[Sequence[float]] = None
    upper: Optional[Sequence[float]] = None
    init: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    name: str = "custom"

    def __post_init__(self):
        if self.p < 1 or self.q < self.p:
            raise ValueError(f"need 1 <= p <= q, got p={self.p}, q={self.q}")

    @property
    def just_identified(self) -> bool:
        return self.q == self.p

    def score(self, theta, y, x) -> np.ndarray:
        theta, y, x = _coerce(theta, y, x)
        return np.asarray(self.eval_g(theta, y, x), dtype=float).reshape(y.size, self.q)

    def jacobian(self, theta, y, x) -> np.ndarray:
        theta, y, x = _coerce(theta, y, x)
        if self.eval_jacobian is None:
            jac = finite_difference_jacobian(self.eval_g, theta, y, x)
        else:
            jac = self.eval_jacobian(theta, y, x)
        return np.asarray(jac, dtype=float).reshape(y.size, self.q, self.p)

    def project(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        lo = -np.inf if self.lower is None else np.asarray(self.lower, dtype=float)
        hi = np.inf if self.upper is None else np.asarray(self.upper, dtype=float)
        return np.clip(theta, lo, hi)

    def initial_theta(self, y, x) -> np.ndarray:
        """Supervised starting value (model-provided, otherwise zeros)."""
        if self.init is not None:
            return self.project(np.asarray(self.init(np.asarray(y), np.asarray(x)), dtype=float).reshape(self.p))
        return self.project(np.zeros(self.p))


def _coerce(theta, y, x):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x = np.asarray(x, dtype=float)
    if x.ndim < 2:
        x = x.reshape(y.size, -1)
    return theta, y, x


def builtin_mean_model() -> MomentModel:
    """Mean of the response: ``g = y - theta``."""

    def g(theta, y, x):
        return (y - theta[0])[:, None]

    def jac(theta, y, x):
        return -np.ones((y.size, 1, 1))

    return MomentModel(1, 1, g, jac, init=lambda y, x: np.array([np.mean(y)]), name="mean")


def builtin_linreg_model(d: int) -> MomentModel:
    """Linear projection coefficients: ``g = x (x'theta - y)``."""
    if d < 1:
        raise ValueError("d must be >= 1")

    def g(theta, y, x):
        return x * (x @ theta - y)[:, None]

    def jac(theta, y, x):
        return x[:, :, None] * x[:, None, :]

    def init(y, x):
        return np.linalg.lstsq(x, y, rcond=None)[0]

    return MomentModel(d, d, g, jac, init=init, name="linreg")


def builtin_overidentified_mean_model() -> MomentModel:
    """Mean with the extra restriction ``E(Y^2) = 4 theta^2``; theta is kept positive."""

    def g(theta, y, x):
        t = theta[0]
        return np.column_stack([y - t, y * y - 4.0 * t * t])

    def jac(theta, y, x):
        out = np.empty((y.size, 2, 1))
        out[:, 0, 0] = -1.0
        out[:, 1, 0] = -8.0 * theta[0]
        return out

    return MomentModel(
        1, 2, g, jac, lower=[1e-8], init=lambda y, x: np.array([max(np.mean(y), 1e-8)]),
        name="overidentified",
    )


BUILTIN_MODELS = ("mean", "linreg", "overidentified")


def builtin_model(name: str, d: int = 1) -> MomentModel:
    if name == "mean":
        return builtin_mean_model()
    if name == "linreg":
        return builtin_linreg_model(d)
    if name == "overidentified":
        return builtin_overidentified_mean_model()
    raise SchemaError(f"unknown model {name!r}; expected one of {BUILTIN_MODELS}")


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PPIDataset:
    """Labeled triples ``(Y, X, Ytilde)`` plus unlabeled pairs ``(X, Ytilde)``."""

    labeled_y: np.ndarray
    labeled_x: np.ndarray
    labeled_ytilde: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_ytilde: np.ndarray

    def __post_init__(self):
        y = _readonly(self.labeled_y).reshape(-1)
        n = y.size
        if n < 2:
            raise InsufficientDataError(f"need at least 2 labeled rows, got {n}")
        lx = _readonly(self.labeled_x)
        lx = lx.reshape(n, -1) if lx.ndim < 2 else lx
        lt = _readonly(self.labeled_ytilde).reshape(-1)
        ut = _readonly(self.unlabeled_ytilde).reshape(-1)
        ux = _readonly(self.unlabeled_x)
        if ux.size == 0:
            ux = ux.reshape(0, lx.shape[1])
        elif ux.ndim < 2:
            ux = ux.reshape(ut.size, -1)
        if lt.size != n or lx.shape[0] != n or ux.shape[0] != ut.size:
            raise SchemaError("dataset arrays have inconsistent lengths")
        if ux.shape[1] != lx.shape[1]:
            raise SchemaError(f"covariate columns differ: labeled {lx.shape[1]}, unlabeled {ux.shape[1]}")
        for name, val in (("labeled_y", y), ("labeled_x", lx), ("labeled_ytilde", lt), ("unlabeled_x", ux), ("unlabeled_ytilde", ut)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.labeled_y.size

    @property
    def m(self) -> int:
        return self.unlabeled_ytilde.size

    @property
    def d(self) -> int:
        return self.labeled_x.shape[1]

    @property
    def gamma_n(self) -> float:
        return self.n / (self.n + self.m)

    def features(self) -> np.ndarray:
        """Stacked ``(Ytilde, X)`` for all ``n + m`` rows, labeled rows first."""
        lab = np.column_stack([self.labeled_ytilde, self.labeled_x])
        unl = np.column_stack([self.unlabeled_ytilde, self.unlabeled_x])
        return np.vstack([lab, unl])


@dataclass(frozen=True)
class Tolerances:
    inner_tol: float = 1e-10
    inner_max_iter: int = 200
    outer_tol: float = 1e-9
    outer_max_iter: int = 200


@dataclass(frozen=True)
class ProblemConfig:
    model: MomentModel
    aux_spec: "object" = None  # AuxSpec; typed loosely to avoid an import cycle
    alpha: float = 0.1
    seed: int = 0
    tolerances: Tolerances = field(default_factory=Tolerances)
    mc_draws: int = 200_000

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


# ---------------------------------------------------------------- CSV I/O

DEFAULT_SCHEMA = {"labeled": "labeled", "y": "y", "y_tilde": "y_tilde"}
_XCOL = re.compile(r"^x(\d+)$")


def _resolve_schema(header, schema):
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    for key in ("labeled", "y", "y_tilde"):
        if schema[key] not in header:
            raise SchemaError(f"missing column {schema[key]!r} (role {key})")
    xcols = schema.get("x")
    if xcols is None:
        found = [(int(mt.group(1)), h) for h in header if (mt := _XCOL.match(h))]
        xcols = [h for _, h in sorted(found)]
    for c in xcols:
        if c not in header:
            raise SchemaError(f"missing covariate column {c!r}")
    schema["x"] = list(xcols)
    return schema


def _num(cell, row, col):
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"non-numeric value {cell!r} in column {col!r}", row) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {cell!r} in column {col!r}", row)
    return v


def load_dataset(path, schema: Optional[dict] = None) -> PPIDataset:
    """Read a CSV with a 0/1 label flag, response, prediction and ``x1..xd`` columns.

    ``schema`` maps the roles ``labeled``, ``y``, ``y_tilde`` and ``x`` (a list)
    to column names; covariates default to all ``x<k>`` columns in index order.
    Row numbers in errors count data rows from 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InsufficientDataError(f"{path}: empty file")
        sc = _resolve_schema(reader.fieldnames, schema)
        lab, unl = [], []
        for row_no, row in enumerate(reader, start=1):
            flag_cell = (row[sc["labeled"]] or "").strip()
            y_cell = (row[sc["y"]] or "").strip()
            t_cell = (row[sc["y_tilde"]] or "").strip()
            if not y_cell and not t_cell:
                raise ParseError("both response and prediction are missing", row_no)
            flag = _num(flag_cell, row_no, sc["labeled"])
            if flag not in (0.0, 1.0):
                raise ParseError(f"label flag must be 0 or 1, got {flag_cell!r}", row_no)
            if not t_cell:
                raise ParseError(f"missing prediction in column {sc['y_tilde']!r}", row_no)
            yt = _num(t_cell, row_no, sc["y_tilde"])
            xs = [_num((row[c] or "").strip(), row_no, c) for c in sc["x"]]
            if flag == 1.0:
                if not y_cell:
                    raise ParseError("labeled row without a response", row_no)
                lab.append((_num(y_cell, row_no, sc["y"]), yt, xs))
            else:
                unl.append((yt, xs))
    d = len(sc["x"])
    if len(lab) < 2:
        raise InsufficientDataError(f"{path}: need at least 2 labeled rows, found {len(lab)}")
    return PPIDataset(
        labeled_y=[r[0] for r in lab],
        labeled_x=np.array([r[2] for r in lab], dtype=float).reshape(len(lab), d),
        labeled_ytilde=[r[1] for r in lab],
        unlabeled_x=np.array([r[1] for r in unl], dtype=float).reshape(len(unl), d),
        unlabeled_ytilde=[r[0] for r in unl],
    )


def save_dataset(dataset: PPIDataset, path) -> None:
    """Write ``dataset`` in the format read by :func:`load_dataset`.

    Floats are written with ``repr`` so a round trip is bit-exact.
    """
    d = dataset.d
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["labeled", "y", "y_tilde"] + [f"x{j + 1}" for j in range(d)])
        for i in range(dataset.n):
            w.writerow([1, repr(float(dataset.labeled_y[i])), repr(float(dataset.labeled_ytilde[i]))]
                       + [repr(float(v)) for v in dataset.labeled_x[i]])
        for i in range(dataset.m):
            w.writerow([0, "", repr(float(dataset.unlabeled_ytilde[i]))]
                       + [repr(float(v)) for v in dataset.unlabeled_x[i]])
