"""Forward-mode automatic differentiation with array-valued dual numbers.

A :class:`Dual` carries a value array of shape ``S`` and a partials array of
shape ``S + (k,)`` holding the derivative of every entry along ``k`` seeded
directions.  Arithmetic broadcasts like numpy, so code written against the
helpers in this module (``exp``, ``log``, ``where``, ``stack`` ...) runs
unchanged on floats, ndarrays and duals.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Dual", "NonFiniteValue", "NonFiniteGradient", "gradient", "value",
    "is_dual", "exp", "expm1", "log", "log1p", "sqrt", "sin", "cos",
    "square", "fmin", "fmax", "where", "stack", "concatenate", "asum",
    "matvec", "solve", "exprel", "exprel2", "normal_lpdf", "lognormal_lpdf",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class NonFiniteValue(ArithmeticError):
    """The function value itself is NaN or infinite."""


class NonFiniteGradient(ArithmeticError):
    """The value is finite but some gradient component is not."""


def _x(v):
    # append the trailing direction axis to a value so it broadcasts with partials
    if isinstance(v, (np.ndarray, np.generic)):
        return v[..., None]
    return v


class Dual:
    """Value plus directional derivatives, broadcasting like an ndarray."""

    __slots__ = ("val", "der")
    __array_ufunc__ = None  # make ndarray operators defer to ours

    def __init__(self, val, der):
        self.val = val
        self.der = der

    @classmethod
    def variable(cls, x) -> "Dual":
        """Seed every entry of ``x`` as its own direction."""
        x = np.asarray(x, dtype=float)
        n = x.size
        return cls(x, np.eye(n).reshape(x.shape + (n,)))

    @classmethod
    def constant(cls, x, k: int) -> "Dual":
        x = np.asarray(x, dtype=float)
        return cls(x, np.zeros(x.shape + (k,)))

    # -- container protocol -------------------------------------------------
    @property
    def shape(self):
        return np.shape(self.val)

    @property
    def ndim(self):
        return np.ndim(self.val)

    @property
    def nderiv(self) -> int:
        return self.der.shape[-1]

    def __len__(self):
        return len(self.val)

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        didx = idx + (slice(None),) if any(i is Ellipsis for i in idx) else idx
        return Dual(self.val[idx], self.der[didx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def T(self) -> "Dual":
        axes = tuple(range(self.ndim - 1, -1, -1))
        return Dual(np.transpose(self.val), np.transpose(self.der, axes + (self.ndim,)))

    def reshape(self, *shape) -> "Dual":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        val = np.reshape(self.val, shape)
        return Dual(val, np.reshape(self.der, val.shape + (self.nderiv,)))

    def __repr__(self):
        return f"Dual(val={self.val!r}, der={self.der!r})"

    def __float__(self):
        return float(self.val)

    def _bcast(self, val):
        """Partials broadcast to the shape of a result value."""
        if np.shape(val) == np.shape(self.val):
            return self.der
        return np.broadcast_to(self.der, np.shape(val) + (self.nderiv,))

    # -- arithmetic ---------------------------------------------------------
    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __pos__(self):
        return self

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.der + other.der)
        val = self.val + other
        return Dual(val, self._bcast(val))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.der - other.der)
        val = self.val - other
        return Dual(val, self._bcast(val))

    def __rsub__(self, other):
        val = other - self.val
        return Dual(val, -self._bcast(val))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val,
                        self.der * _x(other.val) + other.der * _x(self.val))
        return Dual(self.val * other, self.der * _x(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            val = self.val / other.val
            return Dual(val, (self.der - _x(val) * other.der) / _x(other.val))
        return Dual(self.val / other, self.der / _x(other))

    def __rtruediv__(self, other):
        val = other / self.val
        return Dual(val, -self.der * _x(val / self.val))

    def __pow__(self, other):
        if isinstance(other, Dual):
            return exp(other * log(self))
        val = self.val ** other
        return Dual(val, self.der * _x(other * self.val ** (other - 1.0)))

    def __rpow__(self, other):
        val = other ** self.val
        return Dual(val, self.der * _x(val * np.log(other)))

    def __abs__(self):
        return Dual(np.abs(self.val), self.der * _x(np.where(self.val < 0, -1.0, 1.0)))

    # comparisons act on values only
    def __lt__(self, other):
        return self.val < value(other)

    def __le__(self, other):
        return self.val <= value(other)

    def __gt__(self, other):
        return self.val > value(other)

    def __ge__(self, other):
        return self.val >= value(other)

    def sum(self, axis=None) -> "Dual":
        return asum(self, axis)


def is_dual(x) -> bool:
    return isinstance(x, Dual)


def value(x):
    """Strip derivative information."""
    return x.val if isinstance(x, Dual) else x


def _nderiv(*xs):
    for x in xs:
        if isinstance(x, Dual):
            return x.nderiv
    return None


# -- elementary functions -----------------------------------------------------

def exp(x):
    if isinstance(x, Dual):
        v = np.exp(x.val)
        return Dual(v, x.der * _x(v))
    return np.exp(x)


def expm1(x):
    if isinstance(x, Dual):
        return Dual(np.expm1(x.val), x.der * _x(np.exp(x.val)))
    return np.expm1(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(np.log(x.val), x.der / _x(x.val))
    return np.log(x)


def log1p(x):
    if isinstance(x, Dual):
        return Dual(np.log1p(x.val), x.der / _x(1.0 + x.val))
    return np.log1p(x)


def sqrt(x):
    if isinstance(x, Dual):
        v = np.sqrt(x.val)
        return Dual(v, x.der / _x(2.0 * v))
    return np.sqrt(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.val), x.der * _x(np.cos(x.val)))
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.val), -x.der * _x(np.sin(x.val)))
    return np.cos(x)


def square(x):
    return x * x


def where(cond, a, b):
    """Elementwise select; ``cond`` must be plain booleans."""
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.where(cond, a, b)
    k = _nderiv(a, b)
    val = np.where(cond, value(a), value(b))
    da = a.der if isinstance(a, Dual) else np.zeros(np.shape(a) + (k,))
    db = b.der if isinstance(b, Dual) else np.zeros(np.shape(b) + (k,))
    return Dual(val, np.where(_x(np.asarray(cond)), da, db))


def fmin(a, b):
    """Elementwise minimum; at exact ties the first argument's derivative wins."""
    return where(value(a) <= value(b), a, b)


def fmax(a, b):
    """Elementwise maximum; at exact ties the first argument's derivative wins."""
    return where(value(a) >= value(b), a, b)


def asum(x, axis=None):
    if not isinstance(x, Dual):
        return np.sum(x, axis=axis)
    if axis is None:
        return Dual(np.sum(x.val), x.der.reshape(-1, x.nderiv).sum(axis=0))
    if axis < 0:
        axis += x.ndim
    return Dual(np.sum(x.val, axis=axis), np.sum(x.der, axis=axis))


def stack(xs: Sequence, axis: int = 0):
    k = _nderiv(*xs)
    if k is None:
        return np.stack([np.asarray(x, dtype=float) for x in xs], axis=axis)
    vals = [np.asarray(value(x), dtype=float) for x in xs]
    shape = np.broadcast_shapes(*(v.shape for v in vals))
    vals = [np.broadcast_to(v, shape) for v in vals]
    ders = [np.broadcast_to(x.der, shape + (k,)) if isinstance(x, Dual)
            else np.zeros(shape + (k,)) for x in xs]
    dax = axis if axis >= 0 else axis - 1
    return Dual(np.stack(vals, axis=axis), np.stack(ders, axis=dax))


def concatenate(xs: Sequence, axis: int = 0):
    k = _nderiv(*xs)
    if k is None:
        return np.concatenate(xs, axis=axis)
    vals = [np.atleast_1d(np.asarray(value(x), dtype=float)) for x in xs]
    ders = [np.atleast_1d(x.der) if isinstance(x, Dual) else np.zeros(v.shape + (k,))
            for x, v in zip(xs, vals)]
    dax = axis if axis >= 0 else axis - 1
    return Dual(np.concatenate(vals, axis=axis), np.concatenate(ders, axis=dax))


def matvec(a, x):
    """Batched matrix-vector product ``a[..., m, n] @ x[..., n]``."""
    if not isinstance(a, Dual) and not isinstance(x, Dual):
        return np.einsum("...mn,...n->...m", a, x)
    av, xv = value(a), value(x)
    val = np.einsum("...mn,...n->...m", av, xv)
    der = 0.0
    if isinstance(a, Dual):
        der = der + np.einsum("...mnk,...n->...mk", a.der, xv)
    if isinstance(x, Dual):
        der = der + np.einsum("...mn,...nk->...mk", av, x.der)
    return Dual(val, der)


def solve(a, b):
    """Solve ``a @ x = b`` for a square matrix and a vector right-hand side."""
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.linalg.solve(a, b)
    av, bv = value(a), value(b)
    xv = np.linalg.solve(av, bv)
    k = _nderiv(a, b)
    rhs = b.der if isinstance(b, Dual) else np.zeros(bv.shape + (k,))
    if isinstance(a, Dual):
        rhs = rhs - np.einsum("mnk,n->mk", a.der, xv)
    return Dual(xv, np.linalg.solve(av, rhs))


# -- smooth special functions used by the closed-form PK solutions --------------

def exprel(x):
    """``expm1(x) / x`` with its removable singularity at 0 filled in."""
    xv = value(x)
    small = np.abs(xv) < 1e-5
    if not np.any(small):
        return expm1(x) / x
    safe = where(small, 1.0, x)
    series = 1.0 + x * (0.5 + x * (1.0 / 6.0 + x / 24.0))
    return where(small, series, expm1(safe) / safe)


def exprel2(x):
    """``(e^x (x - 1) + 1) / x**2``, i.e. the integral of ``s e^{xs}`` over [0, 1]."""
    xv = value(x)
    small = np.abs(xv) < 0.05
    safe = where(small, 1.0, x)
    direct = (exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    if not np.any(small):
        return direct
    series = 0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x * (1.0 / 30.0 + x * (1.0 / 144.0 + x / 840.0))))
    return where(small, series, direct)


# -- log densities ------------------------------------------------------------

def normal_lpdf(x, mu, sigma):
    z = (x - mu) / sigma
    return -0.5 * z * z - log(sigma) - _LOG_SQRT_2PI


def lognormal_lpdf(y, mu, sigma):
    """Log density of ``y`` under LogNormal(mu, sigma) (mu on the log scale)."""
    ly = log(y)
    z = (ly - mu) / sigma
    return -0.5 * z * z - log(sigma) - ly - _LOG_SQRT_2PI


# -- driver ---------------------------------------------------------------------

def gradient(f: Callable, x, chunk_size: int | None = None):
    """Value and exact gradient of a scalar function by forward sweeps.

    Parameters
    ----------
    f : callable
        Maps a length-``n`` vector (float array or :class:`Dual`) to a scalar.
    x : array_like
        Evaluation point.
    chunk_size : int, optional
        Number of directions carried per sweep.  ``None`` seeds all ``n``
        directions in one sweep, which is cheapest when ops are vectorised.

    Returns
    -------
    value : float
    grad : ndarray
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 1:
        raise ValueError("gradient needs at least one input")
    chunk = n if chunk_size is None else max(1, int(chunk_size))
    grad = np.empty(n)
    fx = None
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        seed = np.zeros((n, stop - start))
        seed[np.arange(start, stop), np.arange(stop - start)] = 1.0
        out = f(Dual(x, seed))
        if isinstance(out, Dual):
            v, d = float(out.val), np.asarray(out.der, dtype=float).reshape(-1)
        else:
            v, d = float(out), np.zeros(stop - start)
        if fx is None:
            fx = v
            if not math.isfinite(fx):
                raise NonFiniteValue(f"function value is {fx}")
        grad[start:stop] = d
    bad = ~np.isfinite(grad)
    if bad.any():
        raise NonFiniteGradient(f"non-finite gradient components at {np.flatnonzero(bad).tolist()}")
    return fx, grad
