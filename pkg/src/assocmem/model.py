"""Associative-memory model: scores, cross-entropy loss, gradient, Hessian and margins.

Conventions used throughout the package:

* ``E`` is ``N x d`` with row ``x`` the input embedding ``e_x``; ``U`` is ``M x d``
  with row ``y`` the output embedding ``u_y``.
* The score of class ``y`` for token ``x`` is ``u_y^T W e_x`` so that
  ``scores = E @ W.T @ U.T`` has shape ``N x M``.
* An outer product ``a (x) b`` is the matrix ``a b^T``; hence
  ``<W, u (x) e> = u^T W e``.
* Token and class indices are 0-based.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp, softmax

__all__ = [
    "EmbeddingSet",
    "TaskSpec",
    "MarginVector",
    "orthonormal_embeddings",
    "correlated_pair_embeddings",
    "sphere_embeddings",
    "scores",
    "predict",
    "predict_all",
    "loss",
    "zero_one_loss",
    "grad",
    "hessian_vector_product",
    "dense_hessian",
    "margins",
    "update_span_projectors",
]


@dataclass(frozen=True)
class EmbeddingSet:
    """Fixed input rows ``E`` (N x d) and output rows ``U`` (M x d)."""

    E: np.ndarray
    U: np.ndarray
    generator: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        E = np.asarray(self.E, dtype=np.float64)
        U = np.asarray(self.U, dtype=np.float64)
        if E.ndim != 2 or U.ndim != 2:
            raise ValueError("E and U must be 2-D arrays")
        if E.shape[1] != U.shape[1]:
            raise ValueError(f"embedding dimensions differ: {E.shape[1]} vs {U.shape[1]}")
        if E.shape[0] < 1 or U.shape[0] < 2 or E.shape[1] < 2:
            raise ValueError("need N >= 1, M >= 2 and d >= 2")
        if not (np.all(np.isfinite(E)) and np.all(np.isfinite(U))):
            raise ValueError("embeddings must be finite")
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "U", U)

    @property
    def N(self) -> int:
        return self.E.shape[0]

    @property
    def M(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.E.shape[1]


@dataclass(frozen=True)
class TaskSpec:
    """Target map ``f_star`` (length N, values in [0, M)) and token frequencies ``p``."""

    f_star: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.f_star, dtype=np.int64)
        p = np.asarray(self.p, dtype=np.float64)
        if f.ndim != 1 or p.shape != f.shape:
            raise ValueError("f_star and p must be 1-D of equal length")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("p must be a probability vector")
        if np.any(f < 0):
            raise ValueError("f_star values must be non-negative class indices")
        object.__setattr__(self, "f_star", f)
        object.__setattr__(self, "p", p)

    @property
    def N(self) -> int:
        return self.f_star.shape[0]

    def check(self, emb: EmbeddingSet) -> None:
        if self.N != emb.N:
            raise ValueError(f"task has {self.N} tokens but embeddings have {emb.N}")
        if np.any(self.f_star >= emb.M):
            raise ValueError("f_star refers to a class outside [0, M)")


@dataclass(frozen=True)
class MarginVector:
    """Pairwise margins ``m_i(x)`` (N x M, zero at the target) and gap margins (N,)."""

    pairwise: np.ndarray
    gap: np.ndarray


# --------------------------------------------------------------------------- generators


def orthonormal_embeddings(N: int, M: int, d: Optional[int] = None,
                           input_scale: float = 1.0, output_scale: float = 1.0) -> EmbeddingSet:
    """Canonical-basis embeddings; inputs and outputs both use ``f_1, f_2, ...``."""
    d = max(N, M, 2) if d is None else d
    if d < max(N, M):
        raise ValueError("orthonormal embeddings need d >= max(N, M)")
    eye = np.eye(d)
    return EmbeddingSet(input_scale * eye[:N], output_scale * eye[:M],
                        {"kind": "orthonormal", "input_scale": input_scale,
                         "output_scale": output_scale})


def correlated_pair_embeddings(alpha: float, d: int = 2, M: int = 2,
                               output_scale: float = 1.0) -> EmbeddingSet:
    """Two unit input embeddings with ``<e_1, e_2> = alpha`` and orthonormal outputs."""
    if not -1.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [-1, 1]")
    if d < max(M, 2):
        raise ValueError("need d >= max(M, 2)")
    E = np.zeros((2, d))
    E[0, 0] = 1.0
    E[1, 0] = alpha
    E[1, 1] = np.sqrt(max(0.0, 1.0 - alpha * alpha))
    U = output_scale * np.eye(d)[:M]
    return EmbeddingSet(E, U, {"kind": "correlated-pair", "alpha": alpha,
                               "output_scale": output_scale})


def sphere_embeddings(N: int, M: int, d: int, rng: np.random.Generator) -> EmbeddingSet:
    """Input and output embeddings drawn uniformly on the unit sphere of R^d."""
    E = rng.standard_normal((N, d))
    U = rng.standard_normal((M, d))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    return EmbeddingSet(E, U, {"kind": "sphere"})


# --------------------------------------------------------------------------- model


def _check(W, emb: EmbeddingSet, task: Optional[TaskSpec] = None) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (emb.d, emb.d):
        raise ValueError(f"W has shape {W.shape}, expected {(emb.d, emb.d)}")
    if task is not None:
        task.check(emb)
    return W


def scores(W, emb: EmbeddingSet) -> np.ndarray:
    """Score table ``S[x, y] = u_y^T W e_x``."""
    W = _check(W, emb)
    return emb.E @ W.T @ emb.U.T


def predict_all(W, emb: EmbeddingSet) -> np.ndarray:
    # np.argmax returns the first maximiser, i.e. ties go to the lowest class index
    return np.argmax(scores(W, emb), axis=1)


def predict(W, emb: EmbeddingSet, x: int) -> int:
    if not 0 <= x < emb.N:
        raise IndexError(f"token index {x} out of range [0, {emb.N})")
    W = _check(W, emb)
    s = emb.U @ (W @ emb.E[x])
    return int(np.argmax(s))


def loss(W, emb: EmbeddingSet, task: TaskSpec) -> float:
    """Expected cross-entropy ``sum_x p(x) [logsumexp_z S[x, z] - S[x, f*(x)]]``."""
    W = _check(W, emb, task)
    S = emb.E @ W.T @ emb.U.T
    per_token = logsumexp(S, axis=1) - S[np.arange(emb.N), task.f_star]
    return float(np.dot(task.p, per_token))


def zero_one_loss(W, emb: EmbeddingSet, task: TaskSpec) -> float:
    W = _check(W, emb, task)
    wrong = predict_all(W, emb) != task.f_star
    return float(np.dot(task.p, wrong))


def _residual(S: np.ndarray, task: TaskSpec) -> np.ndarray:
    """``p(x) * (softmax(S_x) - onehot(f*(x)))`` row by row."""
    R = softmax(S, axis=1)
    R[np.arange(S.shape[0]), task.f_star] -= 1.0
    return R * task.p[:, None]


def grad(W, emb: EmbeddingSet, task: TaskSpec, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of the loss; ``weights`` replaces ``p`` (used for mini-batches)."""
    W = _check(W, emb, task)
    S = emb.E @ W.T @ emb.U.T
    if weights is None:
        R = _residual(S, task)
    else:
        R = softmax(S, axis=1)
        R[np.arange(emb.N), task.f_star] -= 1.0
        R *= np.asarray(weights, dtype=np.float64)[:, None]
    return emb.U.T @ R.T @ emb.E


def hessian_vector_product(W, emb: EmbeddingSet, task: TaskSpec, V) -> np.ndarray:
    """Apply the loss Hessian at ``W`` to the direction ``V`` (both d x d)."""
    W = _check(W, emb, task)
    V = _check(V, emb)
    P = softmax(emb.E @ W.T @ emb.U.T, axis=1)
    dS = emb.E @ V.T @ emb.U.T
    R = P * dS
    R -= P * R.sum(axis=1, keepdims=True)
    R *= task.p[:, None]
    return emb.U.T @ R.T @ emb.E


def dense_hessian(W, emb: EmbeddingSet, task: TaskSpec) -> np.ndarray:
    """Materialised Hessian on ``vec(W)`` (row-major), shape ``d^2 x d^2``.

    Built term by term from ``sum_x p(x) sum_{z,z'} P_z (delta - P_z') vec(u_z e_x^T) vec(u_z' e_x^T)^T``;
    meant as a test oracle for small problems.
    """
    W = _check(W, emb, task)
    d = emb.d
    if d * d > 4096:
        raise ValueError("dense Hessian only supported for d <= 64")
    P = softmax(emb.E @ W.T @ emb.U.T, axis=1)
    H = np.zeros((d * d, d * d))
    for x in range(emb.N):
        C = np.diag(P[x]) - np.outer(P[x], P[x])
        # columns are vec(u_z e_x^T)
        B = np.stack([np.outer(emb.U[z], emb.E[x]).ravel() for z in range(emb.M)], axis=1)
        H += task.p[x] * B @ C @ B.T
    return H


def margins(W, emb: EmbeddingSet, task: TaskSpec) -> MarginVector:
    W = _check(W, emb, task)
    S = emb.E @ W.T @ emb.U.T
    rows = np.arange(emb.N)
    pairwise = S[rows, task.f_star][:, None] - S
    pairwise[rows, task.f_star] = 0.0
    others = pairwise.copy()
    others[rows, task.f_star] = np.inf
    return MarginVector(pairwise=pairwise, gap=others.min(axis=1))


def update_span_projectors(emb: EmbeddingSet, tol: float = 1e-12):
    """Projectors ``(P_out, P_in)`` with ``P_out G P_in`` the projection onto span{(u_j - u_k) (x) e_i}."""
    diffs = emb.U[1:] - emb.U[0]
    return _range_projector(diffs.T, tol), _range_projector(emb.E.T, tol)


def _range_projector(A: np.ndarray, tol: float) -> np.ndarray:
    Q, s, _ = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > tol * max(1.0, s.max(initial=0.0))))
    Q = Q[:, :rank]
    return Q @ Q.T
