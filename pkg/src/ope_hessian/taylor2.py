"""Second-order forward-mode automatic differentiation.

A :class:`Taylor2` carries a value together with its dense gradient and
Hessian with respect to a fixed parameter vector of dimension ``D``.  All
arithmetic follows the exact second-order chain rules, so evaluating any
estimator with ``Taylor2`` inputs yields the estimator's derivatives.

Memory per scalar is O(D^2); intended for tabular problems with D <= ~100.
Hessians stay exactly symmetric: every update adds either a symmetric
matrix scaled elementwise or a sum ``M + M.T``, both bitwise symmetric.
"""
from __future__ import annotations

import math
from typing import Iterable, Sequence, Union

import numpy as np

Number = Union[int, float]


class DimensionMismatchError(ValueError):
    """Raised when two scalars built over different parameter dimensions meet."""


class Taylor2:
    """Immutable (value, gradient, Hessian) triple.

    Use :func:`constant` and :func:`variable` to build seeds; arithmetic
    operators accept other ``Taylor2`` instances or plain numbers.
    """

    __slots__ = ("value", "grad", "hess")
    # make numpy scalars defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value: float, grad: np.ndarray, hess: np.ndarray):
        # fast internal constructor: no copies, no validation
        self.value = value
        self.grad = grad
        self.hess = hess

    @property
    def dim(self) -> int:
        return self.grad.shape[0]

    def __repr__(self) -> str:
        return f"Taylor2(value={self.value!r}, dim={self.dim})"

    def _check(self, other: "Taylor2") -> None:
        if other.grad.shape[0] != self.grad.shape[0]:
            raise DimensionMismatchError(
                f"cannot combine Taylor2 of dim {self.dim} with dim {other.dim}"
            )

    # ---------- arithmetic ----------
    def __add__(self, other):
        if isinstance(other, Taylor2):
            self._check(other)
            return Taylor2(self.value + other.value, self.grad + other.grad, self.hess + other.hess)
        return Taylor2(self.value + other, self.grad, self.hess)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Taylor2):
            self._check(other)
            return Taylor2(self.value - other.value, self.grad - other.grad, self.hess - other.hess)
        return Taylor2(self.value - other, self.grad, self.hess)

    def __rsub__(self, other):
        return Taylor2(other - self.value, -self.grad, -self.hess)

    def __neg__(self):
        return Taylor2(-self.value, -self.grad, -self.hess)

    def __mul__(self, other):
        if isinstance(other, Taylor2):
            self._check(other)
            cross = np.outer(self.grad, other.grad)
            hess = self.value * other.hess + other.value * self.hess
            hess += cross + cross.T
            return Taylor2(
                self.value * other.value,
                self.value * other.grad + other.value * self.grad,
                hess,
            )
        return Taylor2(self.value * other, self.grad * other, self.hess * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Taylor2):
            return self * other.reciprocal()
        if other == 0:
            raise ZeroDivisionError("Taylor2 division by zero")
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, power: Number):
        if not isinstance(power, (int, float)):
            raise TypeError("only numeric exponents are supported")
        if power == 2:
            return self * self
        v = self.value
        if v <= 0 and not float(power).is_integer():
            raise ValueError("non-integer power of a non-positive value")
        d1 = power * v ** (power - 1)
        d2 = power * (power - 1) * v ** (power - 2)
        return _unary(self, v**power, d1, d2)

    def reciprocal(self) -> "Taylor2":
        v = self.value
        if v == 0:
            raise ZeroDivisionError("Taylor2 division by a zero-valued scalar")
        inv = 1.0 / v
        return _unary(self, inv, -inv * inv, 2.0 * inv * inv * inv)

    def exp(self) -> "Taylor2":
        e = math.exp(self.value)
        return _unary(self, e, e, e)

    def log(self) -> "Taylor2":
        v = self.value
        if v <= 0:
            raise ValueError(f"log of non-positive value {v!r}")
        inv = 1.0 / v
        return _unary(self, math.log(v), inv, -inv * inv)

    # comparisons act on the value only (used for branching, e.g. truncation)
    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)

    def __float__(self) -> float:
        return float(self.value)


def _unary(a: Taylor2, f: float, d1: float, d2: float) -> Taylor2:
    """Apply a scalar function with value f, derivative d1, second derivative d2."""
    g = a.grad
    hess = d1 * a.hess
    hess += d2 * np.outer(g, g)
    return Taylor2(f, d1 * g, hess)


def constant(c: float, dim: int) -> Taylor2:
    """Lift ``c`` as a constant: zero gradient and Hessian."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return Taylor2(float(c), np.zeros(dim), np.zeros((dim, dim)))


def variable(c: float, index: int, dim: int) -> Taylor2:
    """Lift ``c`` as the ``index``-th independent variable."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not 0 <= index < dim:
        raise IndexError(f"index {index} out of range for dim {dim}")
    grad = np.zeros(dim)
    grad[index] = 1.0
    return Taylor2(float(c), grad, np.zeros((dim, dim)))


def variables(values: Sequence[float]) -> list[Taylor2]:
    """Seed every entry of ``values`` as its own variable."""
    flat = np.asarray(values, dtype=float).ravel()
    return [variable(v, i, flat.size) for i, v in enumerate(flat)]


def exp(a):
    return a.exp() if isinstance(a, Taylor2) else math.exp(a)


def log(a):
    if isinstance(a, Taylor2):
        return a.log()
    if a <= 0:
        raise ValueError(f"log of non-positive value {a!r}")
    return math.log(a)


def value_of(a) -> float:
    return a.value if isinstance(a, Taylor2) else float(a)


def mirror_upper(hess: np.ndarray) -> np.ndarray:
    """Rebuild a matrix from its upper triangle so it is exactly symmetric."""
    upper = np.triu(hess)
    return upper + np.triu(hess, 1).T


def linear_combination(coeffs: Sequence[float], scalars: Sequence) -> Union[Taylor2, float]:
    """Return ``sum_k coeffs[k] * scalars[k]`` in one vectorised pass.

    Plain-number inputs give a plain float.  Mixed inputs are allowed as long
    as at least one Taylor2 fixes the dimension.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if len(coeffs) != len(scalars):
        raise ValueError("coeffs and scalars differ in length")
    lifted = [s for s in scalars if isinstance(s, Taylor2)]
    if not lifted:
        return float(np.dot(coeffs, np.asarray(scalars, dtype=float)))
    dim = lifted[0].dim
    values = np.empty(len(scalars))
    grads = np.zeros((len(scalars), dim))
    hesses = np.zeros((len(scalars), dim, dim))
    for k, s in enumerate(scalars):
        if isinstance(s, Taylor2):
            if s.dim != dim:
                raise DimensionMismatchError("mixed dimensions in linear_combination")
            values[k] = s.value
            grads[k] = s.grad
            hesses[k] = s.hess
        else:
            values[k] = s
    hess = np.tensordot(coeffs, hesses, axes=1)
    return Taylor2(float(coeffs @ values), coeffs @ grads, mirror_upper(hess))


def mean(scalars: Iterable) -> Union[Taylor2, float]:
    """Arithmetic mean, accumulated in index order."""
    scalars = list(scalars)
    if not scalars:
        raise ValueError("mean of an empty sequence")
    total = scalars[0]
    for s in scalars[1:]:
        total = total + s
    return total * (1.0 / len(scalars))


def hvp(a: Taylor2, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product using the Hessian the scalar already carries."""
    return a.hess @ np.asarray(v, dtype=float)
