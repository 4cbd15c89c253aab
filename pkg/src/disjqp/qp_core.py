"""Convex QPs whose equality constraints and bounds act on disjoint blocks.

The problem is::

    min  g_x'x + g_y'y + 1/2 [x; y]' [[P_xx, P_xy], [P_xy', P_yy]] [x; y]
    s.t. A x = b,   lower <= y (<= upper)

All matrices are dense numpy arrays. Instances are immutable; the assembled
Hessian and its Cholesky check are computed lazily.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.io
import scipy.linalg

from .errors import (DimensionError, NotPositiveDefiniteError,
                     RankDeficientError)

__all__ = [
    "DisjointQP",
    "Point",
    "ActiveSet",
    "FeasibilityReport",
    "IterationRecord",
    "SolveTrace",
    "evaluate_objective",
    "evaluate_gradient",
    "check_feasibility",
    "at_lower",
    "at_upper",
    "bound_tolerance",
    "build_active_set",
    "reduce",
    "scatter",
    "save_qp",
    "load_qp",
]

BOUND_RTOL = 1e-12


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise DimensionError(name, f"{ndim}-d array", arr.shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DisjointQP:
    g_x: np.ndarray
    g_y: np.ndarray
    P_xx: np.ndarray
    P_xy: np.ndarray
    P_yy: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: Optional[np.ndarray] = None
    constant: float = 0.0
    check_rank: bool = field(default=True, repr=False)

    def __post_init__(self):
        s = object.__setattr__
        s(self, "g_x", _frozen(self.g_x, 1, "g_x"))
        s(self, "g_y", _frozen(self.g_y, 1, "g_y"))
        s(self, "P_xx", _frozen(self.P_xx, 2, "P_xx"))
        s(self, "P_xy", _frozen(self.P_xy, 2, "P_xy"))
        s(self, "P_yy", _frozen(self.P_yy, 2, "P_yy"))
        s(self, "A", _frozen(np.atleast_2d(self.A), 2, "A"))
        s(self, "b", _frozen(np.atleast_1d(self.b), 1, "b"))
        s(self, "lower", _frozen(self.lower, 1, "lower"))
        if self.upper is not None:
            s(self, "upper", _frozen(self.upper, 1, "upper"))

        n, p, m = self.n, self.p, self.m
        expect = {
            "P_xx": (n, n), "P_xy": (n, p), "P_yy": (p, p), "A": (m, n),
            "b": (m,), "lower": (p,),
        }
        if self.upper is not None:
            expect["upper"] = (p,)
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(name, shape, got)
        for name in ("P_xx", "P_yy"):
            M = getattr(self, name)
            if not np.allclose(M, M.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(M).max())):
                raise ValueError(f"{name} is not symmetric")
        if m > n:
            raise RankDeficientError(f"m={m} equality rows exceed n={n}")
        if self.check_rank and m and np.linalg.matrix_rank(self.A) < m:
            raise RankDeficientError("A does not have full row rank")
        if self.upper is not None and np.any(self.lower > self.upper):
            raise ValueError("lower > upper for some bound")
        if np.any(np.isposinf(self.lower)):
            raise ValueError("lower bounds must be < +inf")

    @property
    def n(self) -> int:
        return self.g_x.shape[0]

    @property
    def p(self) -> int:
        return self.g_y.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def upper_or_inf(self) -> np.ndarray:
        return np.full(self.p, np.inf) if self.upper is None else self.upper

    @cached_property
    def P(self) -> np.ndarray:
        P = np.block([[self.P_xx, self.P_xy], [self.P_xy.T, self.P_yy]])
        P.setflags(write=False)
        return P

    @cached_property
    def g(self) -> np.ndarray:
        g = np.concatenate([self.g_x, self.g_y])
        g.setflags(write=False)
        return g

    def validate(self) -> "DisjointQP":
        """Force the positive-definiteness check of the assembled Hessian."""
        try:
            scipy.linalg.cho_factor(self.P, lower=True, check_finite=True)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(
                "assembled Hessian is not positive definite") from exc
        return self

    def split(self, z: np.ndarray) -> "Point":
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n + self.p,):
            raise DimensionError("z", (self.n + self.p,), z.shape)
        return Point(z[: self.n].copy(), z[self.n:].copy())


@dataclass(frozen=True, eq=False)
class Point:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.array(self.x, dtype=float).reshape(-1))
        object.__setattr__(self, "y", np.array(self.y, dtype=float).reshape(-1))

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.x, self.y])

    def copy(self) -> "Point":
        return Point(self.x.copy(), self.y.copy())


def _check_point(qp: DisjointQP, pt: Point) -> None:
    if pt.x.shape != (qp.n,):
        raise DimensionError("x", (qp.n,), pt.x.shape)
    if pt.y.shape != (qp.p,):
        raise DimensionError("y", (qp.p,), pt.y.shape)


def evaluate_objective(qp: DisjointQP, pt: Point) -> float:
    """g'z + 1/2 z'Pz (the stored ``qp.constant`` is not included)."""
    _check_point(qp, pt)
    x, y = pt.x, pt.y
    Pxy_y = qp.P_xy @ y
    quad = x @ (qp.P_xx @ x) + 2.0 * (x @ Pxy_y) + y @ (qp.P_yy @ y)
    return float(qp.g_x @ x + qp.g_y @ y + 0.5 * quad)


def evaluate_gradient(qp: DisjointQP, pt: Point) -> tuple[np.ndarray, np.ndarray]:
    _check_point(qp, pt)
    gx = qp.g_x + qp.P_xx @ pt.x + qp.P_xy @ pt.y
    gy = qp.g_y + qp.P_xy.T @ pt.x + qp.P_yy @ pt.y
    return gx, gy


@dataclass(frozen=True)
class FeasibilityReport:
    equality_residual: float
    bound_margin: float
    equality_ok: bool
    bounds_ok: bool

    @property
    def feasible(self) -> bool:
        return self.equality_ok and self.bounds_ok


def check_feasibility(qp: DisjointQP, pt: Point, tol: float = 1e-10) -> FeasibilityReport:
    """Report ``|Ax - b|_inf`` and the smallest bound slack separately.

    The equality test is scaled by ``1 + |b|_inf``; bounds use ``tol`` as an
    absolute slack. A problem with no bounds reports an infinite margin.
    """
    if tol < 0:
        raise ValueError("tol must be non-negative")
    _check_point(qp, pt)
    res = float(np.abs(qp.A @ pt.x - qp.b).max()) if qp.m else 0.0
    slack = pt.y - qp.lower
    if qp.upper is not None:
        slack = np.minimum(slack, qp.upper - pt.y)
    margin = float(slack.min()) if qp.p else math.inf
    bnorm = float(np.abs(qp.b).max()) if qp.m else 0.0
    return FeasibilityReport(res, margin, res <= tol * (1.0 + bnorm), margin >= -tol)


def bound_tolerance(bound: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return BOUND_RTOL * (1.0 + np.abs(bound))


def at_lower(qp: DisjointQP, y: np.ndarray, tol=None) -> np.ndarray:
    tol = bound_tolerance(qp.lower) if tol is None else tol
    return np.isfinite(qp.lower) & (y <= qp.lower + tol)


def at_upper(qp: DisjointQP, y: np.ndarray, tol=None) -> np.ndarray:
    if qp.upper is None:
        return np.zeros(qp.p, dtype=bool)
    tol = bound_tolerance(qp.upper) if tol is None else tol
    return np.isfinite(qp.upper) & (y >= qp.upper - tol)


@dataclass(frozen=True, eq=False)
class ActiveSet:
    """Bound indices held fixed, split by which bound they sit on."""

    p: int
    lower: np.ndarray
    upper: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        lo = np.unique(np.asarray(self.lower, dtype=int))
        up = np.unique(np.asarray(self.upper, dtype=int))
        if np.intersect1d(lo, up).size:
            raise ValueError("an index cannot be active at both bounds")
        if (lo.size and (lo.min() < 0 or lo.max() >= self.p)) or \
                (up.size and (up.min() < 0 or up.max() >= self.p)):
            raise IndexError("active index out of range")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)
        mask = np.zeros(self.p, dtype=bool)
        mask[lo] = True
        mask[up] = True
        object.__setattr__(self, "_mask", mask)

    @property
    def mask(self) -> np.ndarray:
        return self._mask.copy()

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self._mask)

    @property
    def complement(self) -> np.ndarray:
        return np.flatnonzero(~self._mask)

    def __len__(self) -> int:
        return int(self._mask.sum())

    @classmethod
    def from_mask(cls, lower_mask, upper_mask=None) -> "ActiveSet":
        lower_mask = np.asarray(lower_mask, dtype=bool)
        up = np.flatnonzero(upper_mask) if upper_mask is not None else np.zeros(0, int)
        return cls(lower_mask.size, np.flatnonzero(lower_mask), up)


def build_active_set(qp: DisjointQP, pt: Point, grad_y: Optional[np.ndarray] = None,
                     bound_tol=None) -> ActiveSet:
    """Indices sitting on a bound whose gradient pushes further outwards.

    An index on the lower bound is active when its gradient component is
    positive (on the upper bound, negative). With ``grad_y=None`` every index
    on a bound is active, irrespective of the gradient sign.
    """
    lo = at_lower(qp, pt.y, bound_tol)
    up = at_upper(qp, pt.y, bound_tol) & ~lo
    if grad_y is not None:
        lo &= grad_y > 0
        up &= grad_y < 0
    return ActiveSet.from_mask(lo, up)


def reduce(obj, aset: ActiveSet, axis: Optional[int] = None):
    """Restrict a vector or matrix to the complement of ``aset``.

    Square matrices lose both rows and columns; other matrices lose columns
    (``axis`` overrides which axis is indexed).
    """
    arr = np.asarray(obj)
    keep = aset.complement
    if arr.ndim == 1:
        if arr.shape[0] != aset.p:
            raise DimensionError("vector", (aset.p,), arr.shape)
        return arr[keep]
    if arr.ndim != 2:
        raise ValueError("reduce expects a vector or a matrix")
    if axis is not None:
        return np.take(arr, keep, axis=axis)
    if arr.shape == (aset.p, aset.p):
        return arr[np.ix_(keep, keep)]
    if arr.shape[1] != aset.p:
        raise DimensionError("matrix columns", aset.p, arr.shape[1])
    return arr[:, keep]


def scatter(v_reduced, aset: ActiveSet, lower, upper=None) -> np.ndarray:
    """Inverse of :func:`reduce` for vectors; active slots take their bound."""
    v_reduced = np.asarray(v_reduced, dtype=float)
    keep = aset.complement
    if v_reduced.shape != (keep.size,):
        raise DimensionError("reduced vector", (keep.size,), v_reduced.shape)
    out = np.broadcast_to(np.asarray(lower, dtype=float), (aset.p,)).copy()
    if aset.upper.size:
        if upper is None:
            raise ValueError("upper bounds needed to scatter upper-active slots")
        out[aset.upper] = np.broadcast_to(upper, (aset.p,))[aset.upper]
    out[keep] = v_reduced
    return out


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    complement_size: int
    reduced_grad_norm: float
    alpha: float
    cg_iters: Optional[int] = None
    faces: Optional[int] = None
    dist_to_reference: Optional[float] = None
    x: Optional[np.ndarray] = field(default=None, repr=False)
    y: Optional[np.ndarray] = field(default=None, repr=False)


_BASE_COLUMNS = ("iter", "J", "complement_size", "reduced_grad_norm", "alpha")
_CG_COLUMNS = ("cg_iters", "faces", "dist_to_reference")
_COLUMN_ALIASES = {"iter": "iteration", "J": "objective"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class SolveTrace:
    """Per-outer-iteration log; one record per step actually taken."""

    solver: str
    records: list = field(default_factory=list)
    status: str = "running"

    def append(self, rec: IterationRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def iterations(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        """Values of one field over all records; CSV header names work too."""
        name = _COLUMN_ALIASES.get(name, name)
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def set_reference(self, z_ref: np.ndarray) -> None:
        z_ref = np.asarray(z_ref, dtype=float)
        for r in self.records:
            if r.x is not None:
                r.dist_to_reference = float(np.linalg.norm(np.concatenate([r.x, r.y]) - z_ref))

    def _rows(self, with_cg: bool):
        for r in self.records:
            row = [r.iteration, r.objective, r.complement_size, r.reduced_grad_norm, r.alpha]
            if with_cg:
                row += [r.cg_iters, r.faces, r.dist_to_reference]
            yield [_fmt(v) for v in row]

    def to_csv(self, path, with_cg: Optional[bool] = None) -> None:
        """Write the table; floats use ``repr`` so the file is bit-stable."""
        if with_cg is None:
            with_cg = any(r.cg_iters is not None for r in self.records)
        cols = _BASE_COLUMNS + (_CG_COLUMNS if with_cg else ())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            w.writerows(self._rows(with_cg))

    def to_dict(self) -> dict:
        def num(v):
            if v is None:
                return None
            return int(v) if isinstance(v, (int, np.integer)) else float(v)

        return {
            "solver": self.solver,
            "status": self.status,
            "records": [
                {
                    "iter": r.iteration, "J": num(r.objective),
                    "complement_size": r.complement_size,
                    "reduced_grad_norm": num(r.reduced_grad_norm),
                    "alpha": num(r.alpha), "cg_iters": num(r.cg_iters),
                    "faces": num(r.faces),
                    "dist_to_reference": num(r.dist_to_reference),
                }
                for r in self.records
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


# Matrix Market serialization ---------------------------------------------

_VECTOR_BLOCKS = ("g_x", "g_y", "b", "lower", "upper")
_MATRIX_BLOCKS = ("P_xx", "P_xy", "P_yy", "A")


def save_qp(qp: DisjointQP, directory) -> Path:
    """Write every block as a Matrix Market file plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blocks = {}
    for name in _MATRIX_BLOCKS + _VECTOR_BLOCKS:
        arr = getattr(qp, name)
        if arr is None:
            continue
        fname = f"{name}.mtx"
        data = arr.reshape(-1, 1) if arr.ndim == 1 else arr
        scipy.io.mmwrite(str(directory / fname), np.asarray(data), precision=17)
        blocks[name] = fname
    manifest = {
        "format": "disjoint-qp/1",
        "n": qp.n, "p": qp.p, "m": qp.m,
        "constant": float(qp.constant),
        "blocks": blocks,
    }
    path = directory / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def load_qp(directory) -> DisjointQP:
    """Read a problem written by :func:`save_qp` (its directory or manifest path)."""
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    arrays = {}
    for name, fname in manifest["blocks"].items():
        arr = np.asarray(scipy.io.mmread(str(directory / fname)))
        if hasattr(arr, "toarray"):
            arr = arr.toarray()
        arrays[name] = arr.reshape(-1) if name in _VECTOR_BLOCKS else arr
    qp = DisjointQP(constant=manifest.get("constant", 0.0), **arrays)
    for key in ("n", "p", "m"):
        if getattr(qp, key) != manifest[key]:
            raise DimensionError(f"manifest {key}", manifest[key], getattr(qp, key))
    return qp
