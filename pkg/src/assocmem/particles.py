"""Particle view of the dynamics: scores ``w_ij = u_j^T W e_i`` driven by fixed correlations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from .model import EmbeddingSet, TaskSpec, _check

__all__ = ["CorrelationData", "ParticleState", "correlations", "project",
           "particle_update", "batch_weights"]


@dataclass(frozen=True)
class CorrelationData:
    """``alpha[i, j] = <e_i, e_j>`` and ``beta[i, j, k] = <u_i, u_j - u_k>``."""

    alpha: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class ParticleState:
    w: np.ndarray

    def __add__(self, delta) -> "ParticleState":
        return ParticleState(self.w + np.asarray(delta))


def correlations(emb: EmbeddingSet) -> CorrelationData:
    G = emb.U @ emb.U.T
    # G[i, j] - G[i, k]: negating the difference is exact, so beta[i, j, k] == -beta[i, k, j]
    beta = G[:, :, None] - G[:, None, :]
    return CorrelationData(alpha=emb.E @ emb.E.T, beta=beta)


def project(W, emb: EmbeddingSet) -> ParticleState:
    W = _check(W, emb)
    return ParticleState(emb.E @ W.T @ emb.U.T)


def batch_weights(batch: Sequence[int], N: int) -> np.ndarray:
    """Empirical token frequencies ``count / len(batch)`` of a mini-batch."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ValueError("empty batch")
    if np.any((batch < 0) | (batch >= N)):
        raise IndexError("batch token out of range")
    return np.bincount(batch, minlength=N) / batch.size


def particle_update(state: ParticleState, corr: CorrelationData, task: TaskSpec,
                    eta: float, batch: Optional[Sequence[int]] = None) -> np.ndarray:
    """One descent step expressed on the particles; returns the increment ``Delta w``.

    ``Delta w_ij = eta sum_x q(x) alpha_ix sum_z beta_{j f*(x) z} softmax(w_x)_z`` where
    ``q = p`` for the full batch and the empirical batch frequency otherwise.
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    N = state.w.shape[0]
    q = task.p if batch is None else batch_weights(batch, N)
    P = softmax(state.w, axis=1)
    # B[x, j] = sum_z beta[j, f*(x), z] P[x, z]
    B = np.einsum("jxz,xz->xj", corr.beta[:, task.f_star, :], P)
    return eta * corr.alpha @ (q[:, None] * B)
