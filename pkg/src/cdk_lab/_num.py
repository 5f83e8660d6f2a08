"""Exact/float number handling.

Values that are ints, Fractions or floats with a small power-of-two
denominator are kept as :class:`fractions.Fraction`; everything else is float.
"""
from __future__ import annotations

import math
from fractions import Fraction
from numbers import Rational
from typing import Any, Iterable

import numpy as np

FLOAT_TOL = 1e-12
MAX_DYADIC_DEN = 2**30


def is_exact(x: Any) -> bool:
    tx = type(x)
    if tx is Fraction or tx is int:
        return True
    if tx is float:
        return False
    return isinstance(x, Rational)


def to_number(x: Any):
    """Parse ``x`` into a Fraction when it is (dyadic) rational, else a float."""
    tx = type(x)
    if tx is Fraction:
        return x
    if tx is int:
        return Fraction(x)
    if isinstance(x, bool):
        raise TypeError("booleans are not numbers here")
    if isinstance(x, Rational):
        return Fraction(x)
    if isinstance(x, str):
        s = x.strip()
        try:
            return Fraction(s)
        except ValueError:
            return float(s)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isfinite(x):
            f = Fraction(x)
            if f.denominator <= MAX_DYADIC_DEN:
                return f
        return x
    if isinstance(x, np.integer):
        return Fraction(int(x))
    raise TypeError(f"cannot interpret {x!r} as a number")


def as_array(values: Iterable[Any]) -> np.ndarray:
    """Object array of Fractions when every entry is exact, float64 otherwise."""
    vals = [to_number(v) for v in values]
    if all(type(v) is Fraction for v in vals):
        arr = np.empty(len(vals), dtype=object)
        arr[:] = vals
        return arr
    return np.array([float(v) for v in vals], dtype=float)


def as_matrix(rows) -> np.ndarray:
    rows = [list(r) for r in rows]
    n = len(rows)
    flat = as_array([v for r in rows for v in r])
    if n and len(flat) % n:
        raise ValueError("ragged matrix")
    cols = len(flat) // n if n else 0
    return flat.reshape(n, cols)


def array_is_exact(a: np.ndarray) -> bool:
    return a.dtype == object


def is_zero(x, tol: float = FLOAT_TOL) -> bool:
    if is_exact(x):
        return x == 0
    return abs(x) <= tol


def close(x, y, tol: float = FLOAT_TOL) -> bool:
    if is_exact(x) and is_exact(y):
        return x == y
    return abs(float(x) - float(y)) <= tol


def fsum(values) -> Any:
    """Exact sum for Fractions, compensated float sum otherwise."""
    vals = list(values)
    if all(is_exact(v) for v in vals):
        return sum(vals, Fraction(0))
    return math.fsum(float(v) for v in vals)


def to_float(x) -> float:
    return float(x)
