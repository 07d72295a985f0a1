"""Truncated Taylor expansions of E[f(G)] in the moments of G.

About the origin the expansion consumes raw moments; about the mean it
consumes central moments.  Derivatives are closed-form per function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .moments import central_from_raw

DEFAULT_ORDER = 5
FLAG_RATIO = 0.1


class RadiusError(ValueError):
    """The expansion point lies outside the function's radius of convergence."""


@dataclass(frozen=True)
class FunctionDescriptor:
    name: str
    evaluate: Callable
    derivative: Callable[[int, float], float]
    radius: Callable[[float], float] = lambda a: math.inf

    def __call__(self, x):
        return self.evaluate(x)


def identity() -> FunctionDescriptor:
    def derivative(m, a):
        return a if m == 0 else (1.0 if m == 1 else 0.0)

    return FunctionDescriptor("identity", lambda x: x, derivative)


def exp_neg() -> FunctionDescriptor:
    """f(x) = -exp(-x); f^(m)(a) = (-1)^(m+1) exp(-a)."""

    def derivative(m, a):
        return (-1.0) ** (m + 1) * math.exp(-a)

    return FunctionDescriptor("exp_neg", lambda x: -np.exp(-np.asarray(x, dtype=float)), derivative)


def scaled_exp(beta: float) -> FunctionDescriptor:
    """f(x) = exp(beta * x)."""
    beta = float(beta)

    def derivative(m, a):
        return beta**m * math.exp(beta * a)

    return FunctionDescriptor(
        f"scaled_exp({beta!r})", lambda x: np.exp(beta * np.asarray(x, dtype=float)), derivative
    )


def polynomial(coeffs: Sequence[float]) -> FunctionDescriptor:
    """f(x) = sum_i coeffs[i] * x**i."""
    coeffs = [float(c) for c in coeffs]
    if not coeffs:
        raise ValueError("polynomial needs at least one coefficient")

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for c in reversed(coeffs):
            out = out * x + c
        return out

    def derivative(m, a):
        total = 0.0
        for i in range(len(coeffs) - 1, m - 1, -1):
            total = total * a + coeffs[i] * math.perm(i, m)
        return total

    name = "polynomial(" + ",".join(repr(c) for c in coeffs) + ")"
    return FunctionDescriptor(name, evaluate, derivative)


def square() -> FunctionDescriptor:
    f = polynomial([0.0, 0.0, 1.0])
    return FunctionDescriptor("square", f.evaluate, f.derivative)


def linear_combination(alpha: float, f: FunctionDescriptor, beta: float, g: FunctionDescriptor) -> FunctionDescriptor:
    return FunctionDescriptor(
        f"{alpha!r}*{f.name}+{beta!r}*{g.name}",
        lambda x: alpha * f.evaluate(x) + beta * g.evaluate(x),
        lambda m, a: alpha * f.derivative(m, a) + beta * g.derivative(m, a),
        lambda a: min(f.radius(a), g.radius(a)),
    )


_BUILTINS = {
    "identity": identity,
    "exp_neg": exp_neg,
    "square": square,
    "polynomial": polynomial,
    "scaled_exp": scaled_exp,
}


def register_builtin(name: str, *args) -> FunctionDescriptor:
    """Look up a builtin by name.

    Parametrised builtins take their parameters either as extra arguments or
    inline, e.g. ``"polynomial:0,0,1"`` or ``"scaled_exp:-0.5"``.
    """
    if ":" in name:
        name, params = name.split(":", 1)
        parsed = [float(p) for p in params.split(",") if p.strip()]
        args = (parsed,) if name == "polynomial" else tuple(parsed)
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ValueError(f"unknown function {name!r}; known: {sorted(_BUILTINS)}") from None
    return factory(*args)


@dataclass(frozen=True)
class UtilityEstimate:
    center: str
    order: int
    value: float
    terms: tuple[float, ...]
    state: int | None = None
    expansion_point: float = 0.0


def _expand(f, point, moments, order, center, state):
    if len(moments) < order + 1:
        raise ValueError(f"order {order} needs {order + 1} moments, got {len(moments)}")
    terms = tuple(
        f.derivative(m, point) / math.factorial(m) * moments[m] for m in range(order + 1)
    )
    return UtilityEstimate(center, order, sum(terms), terms, state, point)


def taylor_about_zero(f: FunctionDescriptor, raw_moments: Sequence[float], order: int = DEFAULT_ORDER, state=None) -> UtilityEstimate:
    """Sum of f^(m)(0)/m! * v_m for m = 0..order; raw_moments[0] is v_0."""
    return _expand(f, 0.0, raw_moments, order, "origin", state)


def taylor_about_mean(
    f: FunctionDescriptor, mean: float, central_moments: Sequence[float], order: int = DEFAULT_ORDER, state=None
) -> UtilityEstimate:
    """Sum of f^(m)(v_1)/m! * c_m for m = 0..order; central_moments[0] is c_0 = 1."""
    return _expand(f, mean, central_moments, order, "mean", state)


def expand(f: FunctionDescriptor, raw_moments: Sequence[float], center: str = "mean", order: int = DEFAULT_ORDER, state=None) -> UtilityEstimate:
    """Expansion from raw moments [v_0, v_1, ..., v_N] about either center."""
    raw = list(raw_moments)
    if center == "origin":
        return taylor_about_zero(f, raw, order, state)
    if center == "mean":
        return taylor_about_mean(f, raw[1] if len(raw) > 1 else 0.0, central_from_raw(raw), order, state)
    raise ValueError(f"unknown center {center!r}")


@dataclass(frozen=True)
class TruncationReport:
    center: str
    order: int
    term_magnitudes: tuple[float, ...]
    partial_sum: float
    last_term_ratio: float
    flagged: bool


def truncation_report(
    f: FunctionDescriptor,
    center: str,
    moments: Sequence[float],
    order: int = DEFAULT_ORDER,
    mean: float | None = None,
) -> TruncationReport:
    """Flag expansions whose last retained term is large relative to the sum.

    ``moments`` are raw moments for ``center="origin"`` and central moments
    for ``center="mean"`` (which also needs ``mean``).  Raises
    :class:`RadiusError` when the mean lies outside the radius of
    convergence around the expansion point.
    """
    if center == "origin":
        est = taylor_about_zero(f, moments, order)
        v1 = moments[1] if len(moments) > 1 else 0.0
    elif center == "mean":
        if mean is None:
            raise ValueError("center='mean' needs the mean")
        est = taylor_about_mean(f, mean, moments, order)
        v1 = mean
    else:
        raise ValueError(f"unknown center {center!r}")
    if abs(v1 - est.expansion_point) > f.radius(est.expansion_point):
        raise RadiusError(
            f"|v1 - a| = {abs(v1 - est.expansion_point)} exceeds the radius of {f.name}"
        )
    mags = tuple(abs(t) for t in est.terms)
    ratio = 0.0
    if order > 0:
        ratio = mags[-1] / abs(est.value) if est.value != 0 else (math.inf if mags[-1] > 0 else 0.0)
    return TruncationReport(center, order, mags, est.value, ratio, order > 0 and ratio > FLAG_RATIO)
