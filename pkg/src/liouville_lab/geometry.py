"""Möbius transformations of R^d ∪ {∞}, the round metric and stereographic charts.

Chart points are numpy arrays of shape ``(d,)`` or ``(n, d)``. The point at
infinity is the singleton :data:`INF` for scalar input and a row of ``inf``
entries inside a batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np


class _Infinity:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INF"

    def __reduce__(self):
        return (_Infinity, ())


INF = _Infinity()


class InfiniteFactorError(ValueError):
    """A conformal factor was requested at a point sent to infinity mid-chain."""


def is_infinite(x) -> np.ndarray | bool:
    """True where a chart point is the point at infinity."""
    if x is INF:
        return True
    x = np.asarray(x, dtype=float)
    return ~np.all(np.isfinite(x), axis=-1)


def _as_batch(x, d=None):
    """Return (array of shape (n, d), scalar flag)."""
    if x is INF:
        if d is None:
            raise ValueError("dimension needed to represent INF in a batch")
        return np.full((1, d), np.inf), True
    arr = np.array(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
        scalar = True
    else:
        scalar = False
    bad = ~np.all(np.isfinite(arr), axis=-1)
    arr[bad] = np.inf
    return arr, scalar


def _from_batch(arr, scalar):
    if scalar:
        row = arr[0]
        return INF if not np.all(np.isfinite(row)) else row
    return arr


# --- primitives -------------------------------------------------------------


@dataclass(frozen=True)
class Translation:
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))

    @property
    def dim(self):
        return self.y.shape[0]

    def apply(self, x):
        return x + self.y

    def factor(self, x):
        return np.ones(x.shape[0])

    def inverse(self):
        return Translation(-self.y)


@dataclass(frozen=True)
class Dilation:
    lam: float

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam == 0.0:
            raise ValueError("dilation factor must be finite and nonzero")

    dim = None

    def apply(self, x):
        return self.lam * x

    def factor(self, x):
        return np.full(x.shape[0], abs(self.lam))

    def inverse(self):
        return Dilation(1.0 / self.lam)


@dataclass(frozen=True)
class Rotation:
    omega: np.ndarray

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=float)
        if om.ndim != 2 or om.shape[0] != om.shape[1]:
            raise ValueError("rotation must be a square matrix")
        if np.max(np.abs(om.T @ om - np.eye(om.shape[0]))) > 1e-12:
            raise ValueError("rotation matrix is not orthogonal within 1e-12")
        if np.linalg.det(om) < 0:
            raise ValueError("rotation matrix must have determinant +1")
        object.__setattr__(self, "omega", om)

    @property
    def dim(self):
        return self.omega.shape[0]

    def apply(self, x):
        return x @ self.omega.T

    def factor(self, x):
        return np.ones(x.shape[0])

    def inverse(self):
        return Rotation(self.omega.T.copy())


@dataclass(frozen=True)
class Inversion:
    """x ↦ −x̄/|x|² with x̄ = (x1, −x2, …, −xd); swaps 0 and ∞."""

    dim = None

    def apply(self, x):
        r2 = np.sum(x * x, axis=-1)
        xbar = -x.copy()
        xbar[:, 0] = -xbar[:, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -xbar / r2[:, None]
        out[r2 == 0.0] = np.inf
        return out

    def factor(self, x):
        r2 = np.sum(x * x, axis=-1)
        if np.any(r2 == 0.0):
            raise InfiniteFactorError("inversion sends 0 to infinity")
        return 1.0 / r2

    def inverse(self):
        return self


Primitive = Union[Translation, Dilation, Rotation, Inversion]


def _apply_primitive(p, x):
    """Apply a primitive to a batch, keeping ∞ rows explicit."""
    inf = ~np.all(np.isfinite(x), axis=-1)
    out = np.empty_like(x)
    fin = ~inf
    if np.any(fin):
        out[fin] = p.apply(x[fin])
    if np.any(inf):
        # translations, dilations and rotations fix ∞; inversion sends it to 0
        out[inf] = 0.0 if isinstance(p, Inversion) else np.inf
    out[~np.all(np.isfinite(out), axis=-1)] = np.inf
    return out


@dataclass(frozen=True)
class MobiusMap:
    """Composition of primitives, applied left to right."""

    primitives: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def __call__(self, x):
        return mobius_apply(self, x)

    def then(self, other: "MobiusMap") -> "MobiusMap":
        """The map x ↦ other(self(x))."""
        return MobiusMap(self.primitives + other.primitives)


def mobius_apply(m: MobiusMap, x, d: int | None = None):
    """Apply ``m`` to a chart point or a batch of chart points."""
    if d is None:
        d = next((p.dim for p in m.primitives if p.dim is not None), None)
    arr, scalar = _as_batch(x, d)
    for p in m.primitives:
        arr = _apply_primitive(p, arr)
    return _from_batch(arr, scalar)


def mobius_conformal_factor(m: MobiusMap, x):
    """Linear scale |ψ'(x)| = |Jac ψ(x)|^{1/d}, accumulated along the chain by the chain rule."""
    if x is INF:
        raise InfiniteFactorError("conformal factor is not defined at infinity")
    arr, scalar = _as_batch(x)
    if np.any(is_infinite(arr)):
        raise InfiniteFactorError("conformal factor is not defined at infinity")
    fac = np.ones(arr.shape[0])
    last = len(m.primitives) - 1
    for i, p in enumerate(m.primitives):
        fac = fac * p.factor(arr)
        arr = _apply_primitive(p, arr)
        if i < last and np.any(is_infinite(arr)):
            raise InfiniteFactorError("a prefix of the composition maps x to infinity")
    return fac[0] if scalar else fac


def mobius_invert(m: MobiusMap) -> MobiusMap:
    return MobiusMap(tuple(p.inverse() for p in reversed(m.primitives)))


def random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    # re-orthonormalize so the 1e-12 validation always passes
    u, _, vt = np.linalg.svd(q)
    return u @ vt


def random_mobius(rng: np.random.Generator, d: int, n_primitives: int = 4) -> MobiusMap:
    """Random composition of primitives with moderate parameters."""
    prims: list[Primitive] = []
    for _ in range(n_primitives):
        kind = rng.integers(4)
        if kind == 0:
            prims.append(Translation(rng.normal(size=d)))
        elif kind == 1:
            prims.append(Dilation(float(rng.uniform(0.3, 3.0) * rng.choice([-1.0, 1.0]))))
        elif kind == 2:
            prims.append(Rotation(random_rotation(rng, d)))
        else:
            prims.append(Inversion())
    return MobiusMap(tuple(prims))


@dataclass(frozen=True, eq=False)
class MobiusBatch:
    """n maps in normal form x ↦ a + λΩ J(x − c), J the inversion or the identity.

    Every Möbius map has this form, so the batch covers the group while
    evaluating one point per map without Python-level loops.
    """

    c: np.ndarray        # (n, d)
    invert: np.ndarray   # (n,) bool
    omega: np.ndarray    # (n, d, d)
    lam: np.ndarray      # (n,)
    a: np.ndarray        # (n, d)

    def __len__(self):
        return self.lam.shape[0]

    def apply(self, x):
        """Image of row k of ``x`` under map k (infinite rows allowed)."""
        x = np.asarray(x, dtype=float)
        inf = ~np.all(np.isfinite(x), axis=-1)
        y = np.where(inf[:, None], 0.0, x) - self.c
        r2 = np.sum(y * y, axis=-1)
        inv = self.invert
        with np.errstate(divide="ignore", invalid="ignore"):
            yi = y.copy()
            yi[:, 0] = -yi[:, 0]
            yi = yi / r2[:, None]
        y = np.where(inv[:, None], yi, y)
        out = self.a + self.lam[:, None] * np.einsum("nij,nj->ni", self.omega, y)
        to_inf = (inv & (r2 == 0.0) & ~inf) | (~inv & inf)
        out[to_inf] = np.inf
        out[inv & inf] = self.a[inv & inf]
        return out

    def conformal_factor(self, x):
        """|ψ_k'(x_k)| for each row."""
        x = np.asarray(x, dtype=float)
        r2 = np.sum((x - self.c) ** 2, axis=-1)
        if np.any(~np.all(np.isfinite(x), axis=-1)) or np.any(self.invert & (r2 == 0.0)):
            raise InfiniteFactorError("conformal factor is not defined at infinity")
        return np.abs(self.lam) * np.where(self.invert, 1.0 / np.where(r2 > 0, r2, 1.0), 1.0)

    def map(self, k: int) -> MobiusMap:
        """Map k as a composition of primitives."""
        prims = [Translation(-self.c[k])]
        if self.invert[k]:
            prims.append(Inversion())
        prims += [Rotation(self.omega[k]), Dilation(float(self.lam[k])), Translation(self.a[k])]
        return MobiusMap(tuple(prims))


def random_mobius_batch(rng: np.random.Generator, d: int, n: int) -> MobiusBatch:
    """n random maps in normal form with moderate parameters."""
    q, r = np.linalg.qr(rng.standard_normal((n, d, d)))
    q = q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]
    q[np.linalg.det(q) < 0, :, 0] *= -1.0
    u, _, vt = np.linalg.svd(q)
    lam = rng.uniform(0.3, 3.0, n) * rng.choice([-1.0, 1.0], n)
    return MobiusBatch(rng.normal(size=(n, d)), rng.random(n) < 0.5, u @ vt, lam, rng.normal(size=(n, d)))


# --- round metric and charts -------------------------------------------------


@dataclass(frozen=True)
class RoundMetric:
    d: int

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ValueError("dimension must be an even integer >= 2")

    def density(self, x):
        return round_metric_density(x)


def round_metric_density(x):
    """ĝ(x) = 4/(1+|x|²)², and 0 at infinity."""
    if x is INF:
        return 0.0
    arr = np.asarray(x, dtype=float)
    r2 = np.sum(arr * arr, axis=-1)
    with np.errstate(over="ignore", invalid="ignore"):
        out = 4.0 / (1.0 + r2) ** 2
    return np.where(np.isfinite(r2), out, 0.0)


def metric_pullback_ratio(m: MobiusMap, x):
    """|ψ'(x)|² ĝ(ψx)/ĝ(x), written to stay finite when ψx = ∞."""
    arr, scalar = _as_batch(x)
    fac = np.ones(arr.shape[0])
    for p in m.primitives:
        r2 = np.sum(arr * arr, axis=-1)
        new = _apply_primitive(p, arr)
        r2n = np.sum(new * new, axis=-1)
        # |p'|² (1+|x|²)²/(1+|px|²)², stable for large |px|
        if np.any(~np.isfinite(r2)) and not isinstance(p, Inversion):
            raise InfiniteFactorError("a prefix of the composition maps x to infinity")
        if isinstance(p, Inversion):
            step = np.ones_like(fac)  # inversion is an isometry of the sphere
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                step = (p.factor(arr) * (1.0 + r2) / (1.0 + r2n)) ** 2
            step = np.where(np.isfinite(r2n), step, 0.0)
        fac = fac * step
        arr = new
    return fac[0] if scalar else fac


def to_chart(p):
    """Stereographic projection from the pole e_{d+1}: x = p[:d]/(1 − p_{d+1})."""
    arr = np.asarray(p, dtype=float)
    scalar = arr.ndim == 1
    arr = np.atleast_2d(arr)
    norms = np.linalg.norm(arr, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-12):
        raise ValueError("sphere points must have unit norm within 1e-12")
    denom = 1.0 - arr[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = arr[:, :-1] / denom[:, None]
    x[denom <= 0.0] = np.inf
    return _from_batch(x, scalar)


def from_chart(x, d: int | None = None):
    """Inverse stereographic projection; ∞ goes to the pole."""
    arr, scalar = _as_batch(x, d)
    r2 = np.sum(arr * arr, axis=-1)
    inf = ~np.isfinite(r2)
    r2f = np.where(inf, 0.0, r2)
    xf = np.where(inf[:, None], 0.0, arr)
    p = np.concatenate([2.0 * xf, (r2f - 1.0)[:, None]], axis=1) / (1.0 + r2f)[:, None]
    p[inf] = 0.0
    p[inf, -1] = 1.0
    return p[0] if scalar else p


def chordal_distance(x, y):
    """Euclidean distance in R^{d+1} between the sphere images of chart points."""
    if x is INF or y is INF:
        d = np.asarray(y if x is INF else x).shape[-1]
        return np.linalg.norm(from_chart(x, d) - from_chart(y, d), axis=-1)
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if np.all(np.isfinite(xa)) and np.all(np.isfinite(ya)):
        return (
            round_metric_density(xa) ** 0.25
            * round_metric_density(ya) ** 0.25
            * np.linalg.norm(xa - ya, axis=-1)
        )
    d = xa.shape[-1]
    return np.linalg.norm(from_chart(xa, d) - from_chart(ya, d), axis=-1)


def chordal_from_sphere(p, q):
    return np.linalg.norm(np.asarray(p) - np.asarray(q), axis=-1)


def parse_points(points: Sequence[Sequence[float]]) -> np.ndarray:
    return np.atleast_2d(np.asarray(points, dtype=float))
