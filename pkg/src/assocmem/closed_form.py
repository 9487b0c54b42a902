"""Closed-form oracles for the orthogonal and two-token dynamics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, NamedTuple

import numpy as np

from .model import EmbeddingSet, TaskSpec, _range_projector

__all__ = [
    "lambert_w0",
    "lambert_w0_exp",
    "BinaryOrthogonalInstance",
    "binary_margin_closed",
    "h_bound",
    "multiclass_invariants",
    "AsymptoticDirection",
    "asymptotic_direction",
    "TwoTokenInstance",
    "gamma_ode_rhs",
    "gamma1_limit",
    "sinh_threshold",
    "GammaEnvelope",
    "gd_gamma_bounds",
    "gf_gamma2_upper",
    "SpikeBound",
    "spike_lower_bound",
]

_INV_E = math.exp(-1.0)
_MAX_HALLEY = 50


def _lambert_w0_scalar(x: float) -> float:
    if math.isnan(x):
        return math.nan
    if x < -_INV_E:
        # tolerate rounding of -1/e itself
        if x > -_INV_E - 1e-15:
            return -1.0
        raise ValueError(f"lambert_w0 is undefined for x < -1/e (got {x!r})")
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return math.inf
    if x == -_INV_E:
        return -1.0
    if x < -0.25:
        # branch-point series in q = sqrt(2 (e x + 1))
        q = math.sqrt(max(0.0, 2.0 * (math.e * x + 1.0)))
        y = -1.0 + q - q * q / 3.0 + 11.0 / 72.0 * q ** 3
    elif x <= math.e:
        y = math.log1p(x)
    else:
        lx = math.log(x)
        y = lx - math.log(lx)
    for _ in range(_MAX_HALLEY):
        ey = math.exp(y)
        f = y * ey - x
        if f == 0.0:
            break
        y1 = y + 1.0
        if y1 == 0.0:
            break
        dy = f / (ey * y1 - (y + 2.0) * f / (2.0 * y1))
        y -= dy
        if abs(dy) <= 1e-14 * (1.0 + abs(y)):
            break
    return y


def lambert_w0(x):
    """Principal branch of the product logarithm: ``y e^y = x`` with ``y >= -1``.

    Halley iteration from an asymptotic (large x), logarithmic (moderate x) or
    branch-point series (x near -1/e) starting guess. Accepts scalars or arrays.

    Raises
    ------
    ValueError
        If any ``x < -1/e``.
    """
    if np.ndim(x) == 0:
        return _lambert_w0_scalar(float(x))
    arr = np.asarray(x, dtype=np.float64)
    return np.vectorize(_lambert_w0_scalar, otypes=[np.float64])(arr)


def lambert_w0_exp(y: float) -> float:
    """``W0(exp(y))`` without forming ``exp(y)``; solves ``w + log(w) = y``."""
    if y < 600.0:
        return _lambert_w0_scalar(math.exp(y))
    w = y - math.log(y)
    for _ in range(_MAX_HALLEY):
        # Newton on g(w) = w + log w - y, g' = 1 + 1/w
        dw = (w + math.log(w) - y) / (1.0 + 1.0 / w)
        w -= dw
        if abs(dw) <= 1e-15 * w:
            break
    return w


@dataclass(frozen=True)
class BinaryOrthogonalInstance:
    """Scalar margin problem ``(1 + e^m) dm = c dt`` started at ``m0``."""

    c: float
    m0: float = 0.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")

    @property
    def t0(self) -> float:
        return -(math.exp(self.m0) + self.m0) / self.c

    @classmethod
    def from_embeddings(cls, emb: EmbeddingSet, task: TaskSpec, x: int, m0: float = 0.0):
        """``c_x = p(x) |e_x|^2 |u_1 - u_2|^2`` for a binary task."""
        if emb.M != 2:
            raise ValueError("binary instance needs M = 2")
        c = task.p[x] * emb.E[x] @ emb.E[x] * np.sum((emb.U[0] - emb.U[1]) ** 2)
        return cls(float(c), m0)


def binary_margin_closed(inst: BinaryOrthogonalInstance, t: float) -> float:
    """Exact gradient-flow margin of the binary orthogonal problem at time ``t``.

    With ``Y = c t + e^{m0} + m0`` the margin solves ``m + e^m = Y``, i.e.
    ``m = Y - W0(e^Y) = log W0(e^Y)``; the logarithmic form avoids cancellation
    for large ``Y``. Times before ``t0`` are valid but outside the regime where
    ``log(c (t - t0))`` approximates the margin.
    """
    Y = inst.c * t + math.exp(inst.m0) + inst.m0
    return math.log(lambert_w0_exp(Y))


def h_bound(x: float) -> tuple[float, float]:
    """Interval ``[0, 2 log(x) / x]`` containing ``log(x) - m`` when ``x = c (t - t0) >= 1``."""
    if x < 1:
        raise ValueError("h_bound needs x >= 1")
    return 0.0, 2.0 * math.log(x) / x


def multiclass_invariants(w_row, target: int) -> np.ndarray:
    """``exp(-w_i) - exp(-w_j)`` for every pair ``i < j`` of non-target classes."""
    w = np.asarray(w_row, dtype=np.float64)
    others = [i for i in range(w.shape[0]) if i != target]
    ew = np.exp(-w)
    return np.array([ew[i] - ew[j] for i, j in combinations(others, 2)])


@dataclass(frozen=True)
class AsymptoticDirection:
    direction: np.ndarray
    constant: float


def asymptotic_direction(emb: EmbeddingSet, task: TaskSpec, tol: float = 1e-10) -> AsymptoticDirection:
    """Limit direction ``sum_x Pi(u_{f*(x)}) (x) e_x`` of orthonormal gradient flow.

    ``Pi`` projects onto span{u_i - u_j}. For orthonormal outputs
    ``Pi(u_y) = u_y - mean(u)`` and ``W_t / log t`` tends to the returned
    direction itself, so ``constant`` is 1.
    """
    task.check(emb)
    for name, A in (("input", emb.E), ("output", emb.U)):
        if not np.allclose(A @ A.T, np.eye(A.shape[0]), atol=tol, rtol=0):
            raise ValueError(f"{name} embeddings are not orthonormal")
    P = _range_projector((emb.U[1:] - emb.U[0]).T, 1e-12)
    PU = emb.U @ P
    D = PU[task.f_star].T @ emb.E
    return AsymptoticDirection(D, 1.0)


@dataclass(frozen=True)
class TwoTokenInstance:
    """Two alpha-correlated unit tokens, ``f*(x) = x``, with ``p1 >= p2``."""

    p1: float
    p2: float
    alpha: float
    c: float = 2.0

    def __post_init__(self):
        if abs(self.p1 + self.p2 - 1.0) > 1e-12:
            raise ValueError("p1 + p2 must be 1")
        if not self.p1 >= self.p2 > 0:
            raise ValueError("need p1 >= p2 > 0; use TwoTokenInstance.normalized")
        if abs(self.alpha) > 1:
            raise ValueError("alpha must lie in [-1, 1]")

    @classmethod
    def normalized(cls, p1: float, p2: float, alpha: float, c: float = 2.0):
        """Swap the tokens so that the first one is the more frequent."""
        if p1 < p2:
            p1, p2 = p2, p1
        return cls(p1, p2, alpha, c)

    @property
    def c0(self) -> float:
        return (1.0 - self.alpha) * self.c

    @property
    def gamma_bar(self) -> float:
        return 0.5 * math.log(self.p1 / self.p2)


def gamma_ode_rhs(inst: TwoTokenInstance, gamma1: float, gamma2: float) -> tuple[float, float]:
    """Right-hand side of the two-token reduced flow.

    Derivatives are with respect to the rescaled time ``tau = c t / 2``: for
    ``gamma_i = (u_1 - u_2)^T W f_i / 2`` under gradient flow,
    ``d gamma_i / dt = (c / 2) * rhs_i``. The second component is positive
    whenever ``alpha < 1``.
    """
    a = inst.alpha
    s1 = 1.0 / (1.0 + math.exp(gamma2 + gamma1)) if gamma2 + gamma1 < 700 else 0.0
    s2 = 1.0 / (1.0 + math.exp(gamma2 - gamma1)) if gamma2 - gamma1 < 700 else 0.0
    d1 = (1.0 + a) * (inst.p1 * s1 - inst.p2 * s2)
    d2 = (1.0 - a) * (inst.p1 * s1 + inst.p2 * s2)
    return d1, d2


def gamma1_limit(inst: TwoTokenInstance) -> float:
    return 0.5 * math.log(inst.p1 / inst.p2)


def sinh_threshold(inst: TwoTokenInstance, gamma2: float) -> float:
    """``C(gamma2)``: gamma1 decreases iff ``sinh(gamma1 - gamma_bar) >= C(gamma2)``."""
    return (inst.p1 - inst.p2) * math.exp(-gamma2) / (2.0 * math.sqrt(inst.p1 * inst.p2))


class GammaEnvelope(NamedTuple):
    gamma_min: float
    gamma_max: float
    gamma2_lower: Callable[[float], float]


def gd_gamma_bounds(inst: TwoTokenInstance, eta: float) -> GammaEnvelope:
    """Envelope for gradient descent from ``W0 = 0``.

    ``gamma1`` stays in ``[gamma_min, gamma_max]`` (``gamma_min`` already clipped
    at 0) and ``gamma2(t) >= log(eta c1 t / 2 + 1)`` with ``c1 = (1 - alpha) c p2``.
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    slack = eta * inst.c * (1.0 - inst.alpha)
    g_max = inst.gamma_bar + inst.p1 / (2.0 * inst.p2) + slack * inst.p1
    g_min = inst.gamma_bar - slack * inst.p2
    c1 = (1.0 - inst.alpha) * inst.c * inst.p2

    def gamma2_lower(t: float) -> float:
        return math.log(eta * c1 * t / 2.0 + 1.0)

    return GammaEnvelope(min(0.0, g_min), g_max, gamma2_lower)


def gf_gamma2_upper(inst: TwoTokenInstance, t: float) -> float:
    """Gradient-flow upper envelope ``log(c2 t + 1)``, ``c2 = 8 c (1 - alpha) p1^3 / p2^2``."""
    c2 = 8.0 * inst.c * (1.0 - inst.alpha) * inst.p1 ** 3 / inst.p2 ** 2
    return math.log(c2 * t + 1.0)


class SpikeBound(NamedTuple):
    value: float
    applicable: bool


def spike_lower_bound(inst: TwoTokenInstance, eta: float) -> SpikeBound:
    """Lower bound ``eta (alpha p1 - p2) p2`` on the loss after one step from zero.

    Valid when the first step moves the rare margin by exactly
    ``eta (p2 - alpha p1)``, i.e. unit input embeddings and ``|u_1 - u_2|^2 = 2``.
    Returns ``(0, False)`` when ``alpha p1 <= p2``.
    """
    gap = inst.alpha * inst.p1 - inst.p2
    if gap <= 0:
        return SpikeBound(0.0, False)
    return SpikeBound(eta * gap * inst.p2, True)
