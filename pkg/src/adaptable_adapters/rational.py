"""Learnable rational activation ``P(x) / (1 + |Q(x)|)``.

``P`` has coefficients ``a_0..a_m`` and ``Q(x) = b_1 x + ... + b_n x^n`` has
no constant term, so the denominator never drops below one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamState, adam_step
from .rng import stream

log = logging.getLogger(__name__)

DEFAULT_ORDER = (5, 4)


class RationalCoefficients:
    """Numerator ``a`` (m+1 values) and denominator ``b`` (n values) as trainable tensors."""

    def __init__(self, a, b, requires_grad: bool = True):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.ndim != 1 or b.ndim != 1 or a.size < 1:
            raise ValueError(f"bad coefficient shapes a{a.shape} b{b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("rational coefficients must be finite")
        self.a = Tensor(a, requires_grad=requires_grad, name="rational.a")
        self.b = Tensor(b, requires_grad=requires_grad, name="rational.b")

    @property
    def order(self) -> tuple[int, int]:
        return self.a.size - 1, self.b.size

    @property
    def num_parameters(self) -> int:
        return self.a.size + self.b.size

    def parameters(self) -> list[Tensor]:
        return [self.a, self.b]

    def to_dict(self) -> dict:
        return {"a": self.a.values.tolist(), "b": self.b.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict, requires_grad: bool = True) -> "RationalCoefficients":
        return cls(d["a"], d["b"], requires_grad=requires_grad)

    def copy(self) -> "RationalCoefficients":
        return RationalCoefficients(self.a.values.copy(), self.b.values.copy(),
                                    self.a.requires_grad)

    def __call__(self, x: Tensor) -> Tensor:
        return rational_forward(x, self)

    def __repr__(self) -> str:
        return f"RationalCoefficients(a={self.a.values.tolist()}, b={self.b.values.tolist()})"


def _horner(coef: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.full_like(x, coef[-1])
    for c in coef[-2::-1]:
        out = out * x + c
    return out


def _parts(x: np.ndarray, a: np.ndarray, b: np.ndarray):
    num = _horner(a, x)
    # Q(x) = x * (b_1 + b_2 x + ... + b_n x^(n-1))
    s = x * _horner(b, x) if b.size else np.zeros_like(x)
    return num, s, 1.0 + np.abs(s)


def rational_values(x, a, b) -> np.ndarray:
    """Plain-array evaluation, used for plotting and fitting."""
    x = np.asarray(x, dtype=np.float64)
    num, _, den = _parts(x, np.asarray(a, float), np.asarray(b, float))
    return num / den


def denominator(x, b) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return 1.0 + np.abs(x * _horner(b, x)) if b.size else np.ones_like(x)


def rational_backward(x: np.ndarray, a: np.ndarray, b: np.ndarray, upstream: np.ndarray):
    """Gradients of ``sum(upstream * R(x))`` with respect to x, a and b.

    Uses sign(0) = 0 for the derivative of the absolute value.
    """
    m, n = a.size - 1, b.size
    num, s, den = _parts(x, a, b)
    sgn = np.sign(s)
    # derivatives of the polynomials in x
    dnum = _horner(a[1:] * np.arange(1, m + 1), x) if m else np.zeros_like(x)
    ds = _horner(b * np.arange(1, n + 1), x) if n else np.zeros_like(x)
    inv_den = 1.0 / den
    gx = upstream * (dnum * den - num * sgn * ds) * inv_den * inv_den

    g_over_den = (upstream * inv_den).reshape(-1)
    xf = x.reshape(-1)
    powers = np.ones_like(xf)
    ga = np.empty(m + 1)
    for j in range(m + 1):
        ga[j] = g_over_den @ powers
        powers = powers * xf
    coef_b = (-upstream * num * sgn * inv_den * inv_den).reshape(-1)
    gb = np.empty(n)
    powers = xf.copy()
    for k in range(n):
        gb[k] = coef_b @ powers
        powers = powers * xf
    return gx, ga, gb


def rational_forward(x: Tensor, c: RationalCoefficients) -> Tensor:
    xv = x.values
    bad = ~np.isfinite(xv)
    if bad.any():
        idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), xv.shape))
        raise ad.DomainError(f"rational: non-finite input {xv[idx]} at index {idx}")
    a, b = c.a.values, c.b.values
    num, _, den = _parts(xv, a, b)

    def back(g):
        gx, ga, gb = rational_backward(xv, a, b, g)
        return gx, ga, gb

    return ad.get_tape().record("rational", Tensor(num / den), (x, c.a, c.b), back)


def init_constant(value: float, order: tuple[int, int] = DEFAULT_ORDER,
                  requires_grad: bool = True) -> RationalCoefficients:
    if not np.isfinite(value):
        raise ValueError(f"init value must be finite, got {value}")
    m, n = order
    a = np.zeros(m + 1)
    a[0] = value
    return RationalCoefficients(a, np.zeros(n), requires_grad)


def init_identity(order: tuple[int, int] = DEFAULT_ORDER,
                  requires_grad: bool = True) -> RationalCoefficients:
    m, n = order
    a = np.zeros(m + 1)
    a[1] = 1.0
    return RationalCoefficients(a, np.zeros(n), requires_grad)


@dataclass
class FitResult:
    coefficients: RationalCoefficients
    max_abs_error: float
    converged: bool


def _linear_seed(t: np.ndarray, x: np.ndarray, m: int, n: int):
    # N(x) - t(x) * Q(x) = t(x) is linear in (a, b); its minimum-norm solution
    # is exact whenever the target is representable with Q >= 0 on the grid.
    cols = [x ** j for j in range(m + 1)] + [-t * x ** k for k in range(1, n + 1)]
    sol, *_ = np.linalg.lstsq(np.stack(cols, axis=1), t, rcond=None)
    return sol[:m + 1], sol[m + 1:]


def _descend(x, t, a, b, iters, lr):
    a, b = a.copy(), b.copy()
    state = AdamState()
    best = (np.max(np.abs(rational_values(x, a, b) - t)), a.copy(), b.copy())
    for i in range(iters):
        r = rational_values(x, a, b) - t
        _, ga, gb = rational_backward(x, a, b, 2.0 * r / x.size)
        adam_step([a, b], [ga, gb], state, lr=lr)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            break
        if i % 25 == 0 or i == iters - 1:
            err = np.max(np.abs(rational_values(x, a, b) - t))
            if err < best[0]:
                best = (err, a.copy(), b.copy())
    return best


def fit_to_function(target: Callable[[np.ndarray], np.ndarray], grid=None,
                    order: tuple[int, int] = DEFAULT_ORDER, tol: float = 0.1,
                    iters: int = 4000, lr: float = 1e-3, seed: int = 0) -> FitResult:
    """Least-squares fit of a rational to ``target`` sampled on ``grid``.

    A linear solve of the pole-free form seeds Adam on the true squared error;
    a small random start is tried as well and the better result kept.
    """
    m, n = order
    if grid is None:
        grid = np.linspace(-3.0, 3.0, 20 * (m + n + 1))
    x = np.asarray(grid, dtype=np.float64)
    if x.size < 10 * (m + n + 1):
        raise ValueError(f"grid needs at least {10 * (m + n + 1)} points, got {x.size}")
    if x.min() > -3.0 or x.max() < 3.0:
        raise ValueError("grid must span at least [-3, 3]")
    t = np.asarray(target(x), dtype=np.float64)

    a0, b0 = _linear_seed(t, x, m, n)
    err0 = np.max(np.abs(rational_values(x, a0, b0) - t))
    if err0 <= 1e-9:
        best = (err0, a0, b0)
    else:
        rng = stream(seed, "rational-fit")
        starts = [(a0, b0), (rng.normal(0, 0.1, m + 1), rng.normal(0, 0.1, n))]
        best = (np.inf, None, None)
        for a_init, b_init in starts:
            cand = _descend(x, t, a_init, b_init, iters, lr)
            if cand[0] < best[0]:
                best = cand
    err, a, b = best
    converged = bool(err <= tol)
    if not converged:
        log.warning("rational fit reached max error %.4g > tolerance %.4g", err, tol)
    return FitResult(RationalCoefficients(a, b), float(err), converged)


def _relu(x):
    return np.maximum(x, 0.0)


@lru_cache(maxsize=4)
def _relu_fit(order: tuple[int, int]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    fit = fit_to_function(_relu, order=order)
    return tuple(fit.coefficients.a.values), tuple(fit.coefficients.b.values)


def init_named(kind: str, order: tuple[int, int] = DEFAULT_ORDER) -> RationalCoefficients:
    """Initial coefficients by name: ``one``, ``zero``, ``identity`` or ``relu``."""
    if kind == "one":
        return init_constant(1.0, order)
    if kind == "zero":
        return init_constant(0.0, order)
    if kind == "identity":
        return init_identity(order)
    if kind == "relu":
        a, b = _relu_fit(tuple(order))
        return RationalCoefficients(a, b)
    raise ValueError(f"unknown rational init {kind!r}")
