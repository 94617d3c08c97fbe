"""Cylinder test functionals F(t, w) = sum_i f_i(<w,phi_1>,...,<w,phi_k>) g_i(t).

The spatial dependence enters only through finitely many pairings, so the
chain rule along a trajectory needs the outer gradients of the f_i and the
drift pairings against the phi_j.  Time factors must vanish at the horizon,
which is what turns the weak-form time integral into a telescoping test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .fields import SpectralField

ArrayFn = Callable[[np.ndarray], np.ndarray]
TimeFn = Callable[[float], float]


@dataclass(frozen=True)
class CylinderTerm:
    """One product term: outer function (with gradient) times a time factor."""

    f: ArrayFn          # (B, k) pairing values -> (B,)
    grad_f: ArrayFn     # (B, k) -> (B, k)
    g: TimeFn
    dg: TimeFn


@dataclass(frozen=True)
class CylinderFunctional:
    phis: tuple[SpectralField, ...]
    terms: tuple[CylinderTerm, ...]
    horizon: float

    def __post_init__(self):
        for i, term in enumerate(self.terms):
            gT = term.g(self.horizon)
            scale = max(1.0, abs(term.g(0.0)))
            if abs(gT) > 1e-12 * scale:
                raise ValueError(f"time factor of term {i} must vanish at the horizon, got g(T)={gT}")

    @classmethod
    def single(cls, f: ArrayFn, grad_f: ArrayFn, g: TimeFn, dg: TimeFn,
               phis: Sequence[SpectralField], horizon: float) -> "CylinderFunctional":
        return cls(phis=tuple(phis), terms=(CylinderTerm(f, grad_f, g, dg),), horizon=horizon)

    @classmethod
    def time_only(cls, g: TimeFn, dg: TimeFn, horizon: float) -> "CylinderFunctional":
        """F depending on time alone (empty pairing vector)."""
        one = lambda v: np.ones(v.shape[0])
        zero = lambda v: np.zeros_like(v)
        return cls(phis=(), terms=(CylinderTerm(one, zero, g, dg),), horizon=horizon)

    @property
    def n_pairings(self) -> int:
        return len(self.phis)

    def value(self, t: float, pairings: np.ndarray) -> np.ndarray:
        """F(t, .) from pairing values, shape (B, k) -> (B,)."""
        return sum(term.f(pairings) * term.g(t) for term in self.terms)

    def dt_value(self, t: float, pairings: np.ndarray) -> np.ndarray:
        return sum(term.f(pairings) * term.dg(t) for term in self.terms)

    def pairing_gradient(self, t: float, pairings: np.ndarray) -> np.ndarray:
        """dF/d<w,phi_j> as (B, k); contracts against drift pairings."""
        out = np.zeros_like(pairings)
        for term in self.terms:
            out += term.grad_f(pairings) * term.g(t)
        return out

    def empirical_bounds(self, pairings: np.ndarray) -> dict[str, float]:
        """Observed sup of |f_i| and |grad f_i| over a sample of pairing values."""
        sup_f = max(float(np.abs(term.f(pairings)).max()) for term in self.terms)
        if self.n_pairings:
            sup_g = max(float(np.abs(term.grad_f(pairings)).max()) for term in self.terms)
        else:
            sup_g = 0.0
        return {"sup_f": sup_f, "sup_grad_f": sup_g}


def ramp_down(horizon: float) -> tuple[TimeFn, TimeFn]:
    """g(t) = (T - t)/T with its derivative; vanishes at the horizon."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    return (lambda t: (horizon - t) / horizon), (lambda t: -1.0 / horizon)


def bounded_window(scale: float = 1.0) -> tuple[ArrayFn, ArrayFn]:
    """f(v) = tanh(v/scale) on the first pairing: bounded with bounded gradient."""

    def f(v: np.ndarray) -> np.ndarray:
        return np.tanh(v[:, 0] / scale)

    def grad(v: np.ndarray) -> np.ndarray:
        out = np.zeros_like(v)
        out[:, 0] = (1.0 / np.cosh(v[:, 0] / scale)) ** 2 / scale
        return out

    return f, grad
