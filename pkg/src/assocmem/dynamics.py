"""Gradient flow, gradient descent and their stochastic variants on the memory matrix ``W``."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.integrate import solve_ivp

from . import analysis
from .model import EmbeddingSet, TaskSpec, grad, loss, margins, update_span_projectors, zero_one_loss, _check
from .particles import batch_weights

__all__ = [
    "DynamicsConfig",
    "TrajectoryRecord",
    "make_rng",
    "run",
    "gd_run",
    "gf_run",
    "sgd_run",
    "sgf_run",
    "sgd_step",
    "sgf_step",
    "DIVERGENCE_THRESHOLD",
]

DIVERGENCE_THRESHOLD = 1e12
KINDS = ("GF", "GD", "SGD", "SGF")

Schedule = Union[float, Sequence[float]]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for the stream ``(seed, *stream)``; streams are independent."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class DynamicsConfig:
    """Run parameters.

    ``t_end`` is a step count for GD/SGD and a continuous horizon for GF/SGF.
    ``eta`` and ``sigma`` are constants or per-step tables. ``record_every`` is in
    steps (GD/SGD) or time units (GF/SGF); ``record_times`` overrides it.
    """

    kind: str = "GD"
    eta: Schedule = 1.0
    t_end: float = 100
    batch_size: int = 1
    sigma: Schedule = 0.0
    h: float = 1e-2
    seed: int = 0
    stream: tuple = ()
    record_every: float = 1
    record_times: Optional[tuple] = None
    gamma: Optional[str] = None
    sharpness: bool = False
    rtol: float = 1e-8
    atol: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.t_end < 0:
            raise ValueError("t_end must be non-negative")
        if self.record_every <= 0:
            raise ValueError("record_every must be positive")
        if self.batch_size < 1 or self.batch_size > 10 ** 7:
            raise ValueError("batch_size must be in [1, 1e7]")
        if self.h <= 0:
            raise ValueError("h must be positive")
        if np.any(np.asarray(self.eta, dtype=float) < 0):
            raise ValueError("eta must be non-negative")

    def eta_at(self, t: int) -> float:
        return _at(self.eta, t, "eta")

    def sigma_at(self, t: int) -> float:
        return _at(self.sigma, t, "sigma")


def _at(schedule: Schedule, t: int, name: str) -> float:
    if np.ndim(schedule) == 0:
        return float(schedule)
    if t >= len(schedule):
        raise ValueError(f"{name} schedule has {len(schedule)} entries, step {t} requested")
    return float(schedule[t])


@dataclass(frozen=True)
class TrajectoryRecord:
    times: np.ndarray
    loss: np.ndarray
    zero_one: np.ndarray
    margins: np.ndarray           # [record, token] gap margins
    W_final: np.ndarray
    gamma: Optional[np.ndarray] = None       # [record, 2]
    sharpness: Optional[np.ndarray] = None
    status: str = "ok"            # ok | diverged | failed
    message: str = ""

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    def header(self) -> list[str]:
        cols = ["t", "loss", "zero_one"] + [f"margin_{i + 1}" for i in range(self.margins.shape[1])]
        if self.gamma is not None:
            cols += ["gamma1", "gamma2"]
        if self.sharpness is not None:
            cols.append("sharpness")
        return cols

    def table(self) -> np.ndarray:
        parts = [self.times[:, None], self.loss[:, None], self.zero_one[:, None], self.margins]
        if self.gamma is not None:
            parts.append(self.gamma)
        if self.sharpness is not None:
            parts.append(self.sharpness[:, None])
        return np.hstack(parts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.header()) + "\n")
        for row in self.table():
            buf.write(",".join(format_float(v) for v in row) + "\n")
        return buf.getvalue()


def format_float(v: float) -> str:
    return "%.17g" % v


class _Recorder:
    def __init__(self, emb: EmbeddingSet, task: TaskSpec, cfg: DynamicsConfig):
        self.emb, self.task, self.cfg = emb, task, cfg
        self.rows = []

    def __call__(self, t: float, W: np.ndarray) -> bool:
        """Record ``W`` at time ``t``; returns False if the loss is not usable."""
        L = loss(W, self.emb, self.task)
        if not math.isfinite(L) or L > DIVERGENCE_THRESHOLD:
            return False
        row = {
            "t": float(t),
            "loss": L,
            "zero_one": zero_one_loss(W, self.emb, self.task),
            "margins": margins(W, self.emb, self.task).gap,
        }
        if self.cfg.gamma:
            g = analysis.gamma_coords(W, self.emb, self.cfg.gamma)
            row["gamma"] = (g.gamma1, g.gamma2)
        if self.cfg.sharpness:
            row["sharpness"] = analysis.sharpness(W, self.emb, self.task)
        self.rows.append(row)
        return True

    def finish(self, W: np.ndarray, status: str = "ok", message: str = "") -> TrajectoryRecord:
        r = self.rows
        N = self.emb.N
        return TrajectoryRecord(
            times=np.array([x["t"] for x in r]),
            loss=np.array([x["loss"] for x in r]),
            zero_one=np.array([x["zero_one"] for x in r]),
            margins=np.array([x["margins"] for x in r]).reshape(len(r), N),
            W_final=np.array(W, copy=True),
            gamma=np.array([x["gamma"] for x in r]).reshape(len(r), 2) if self.cfg.gamma else None,
            sharpness=np.array([x["sharpness"] for x in r]) if self.cfg.sharpness else None,
            status=status,
            message=message,
        )


def _record_steps(cfg: DynamicsConfig, n_steps: int, unit: float = 1.0) -> set:
    """Step indices to record for discrete runs (always includes 0 and the last step)."""
    if cfg.record_times is not None:
        steps = {int(round(t / unit)) for t in cfg.record_times}
    else:
        every = max(1, int(round(cfg.record_every / unit)))
        steps = set(range(0, n_steps + 1, every))
    steps = {s for s in steps if 0 <= s <= n_steps}
    steps.update({0, n_steps})
    return steps


def _discrete_run(W0, emb, task, cfg: DynamicsConfig, n_steps: int, unit: float, step) -> TrajectoryRecord:
    W = _check(W0, emb, task).copy()
    rec = _Recorder(emb, task, cfg)
    wanted = _record_steps(cfg, n_steps, unit)
    if not rec(0.0, W):
        return rec.finish(W, "diverged", "non-finite loss at initialization")
    for k in range(n_steps):
        W_next = step(k, W)
        if not np.all(np.isfinite(W_next)):
            return rec.finish(W, "diverged", f"non-finite weights at step {k + 1}")
        W = W_next
        if k + 1 in wanted or k + 1 == n_steps:
            if not rec((k + 1) * unit, W):
                return rec.finish(W, "diverged", f"loss above {DIVERGENCE_THRESHOLD:g} at step {k + 1}")
    return rec.finish(W)


def gd_run(W0, emb: EmbeddingSet, task: TaskSpec, cfg: DynamicsConfig) -> TrajectoryRecord:
    """Full-batch gradient descent ``W <- W - eta_t grad L(W)`` for ``t_end`` steps."""
    _expect(cfg, "GD")
    return _discrete_run(W0, emb, task, cfg, int(cfg.t_end), 1.0,
                         lambda k, W: W - cfg.eta_at(k) * grad(W, emb, task))


def sgd_step(W, emb: EmbeddingSet, task: TaskSpec, eta: float, batch: Sequence[int]) -> np.ndarray:
    """One step on the mini-batch loss, tokens weighted by their batch frequency."""
    return W - eta * grad(W, emb, task, weights=batch_weights(batch, emb.N))


def sgd_run(W0, emb: EmbeddingSet, task: TaskSpec, cfg: DynamicsConfig) -> TrajectoryRecord:
    """Stochastic gradient descent; each step draws ``batch_size`` tokens i.i.d. from ``p``."""
    _expect(cfg, "SGD")
    rng = make_rng(cfg.seed, *cfg.stream)

    def step(k, W):
        batch = rng.choice(emb.N, size=cfg.batch_size, p=task.p)
        return sgd_step(W, emb, task, cfg.eta_at(k), batch)

    return _discrete_run(W0, emb, task, cfg, int(cfg.t_end), 1.0, step)


def sgf_step(W, emb: EmbeddingSet, task: TaskSpec, h: float, sigma: float,
             noise: np.ndarray, projectors) -> np.ndarray:
    """Euler-Maruyama step with Gaussian ``noise`` projected onto the update span."""
    P_out, P_in = projectors
    return W - h * grad(W, emb, task) + sigma * math.sqrt(h) * (P_out @ noise @ P_in)


def sgf_run(W0, emb: EmbeddingSet, task: TaskSpec, cfg: DynamicsConfig) -> TrajectoryRecord:
    """Stochastic gradient flow by Euler-Maruyama with fixed step ``h``.

    The noise is restricted to span{(u_j - u_k) (x) e_i}, so the component of
    ``W`` orthogonal to that span keeps its initial value.
    """
    _expect(cfg, "SGF")
    rng = make_rng(cfg.seed, *cfg.stream)
    proj = update_span_projectors(emb)
    n_steps = int(round(cfg.t_end / cfg.h))

    def step(k, W):
        G = rng.standard_normal(W.shape)
        return sgf_step(W, emb, task, cfg.h, cfg.sigma_at(k), G, proj)

    return _discrete_run(W0, emb, task, cfg, n_steps, cfg.h, step)


def _record_times_continuous(cfg: DynamicsConfig) -> np.ndarray:
    if cfg.record_times is not None:
        ts = np.asarray(cfg.record_times, dtype=float)
        ts = ts[(ts >= 0) & (ts <= cfg.t_end)]
    else:
        n = int(math.floor(cfg.t_end / cfg.record_every + 1e-9))
        ts = cfg.record_every * np.arange(n + 1)
    return np.unique(np.concatenate([[0.0], ts, [float(cfg.t_end)]]))


def gf_run(W0, emb: EmbeddingSet, task: TaskSpec, cfg: DynamicsConfig) -> TrajectoryRecord:
    """Gradient flow ``dW = -grad L(W) dt`` by adaptive Dormand-Prince 5(4) integration."""
    _expect(cfg, "GF")
    W0 = _check(W0, emb, task).astype(np.float64)
    rec = _Recorder(emb, task, cfg)
    ts = _record_times_continuous(cfg)
    if cfg.t_end == 0:
        rec(0.0, W0)
        return rec.finish(W0)
    shape = W0.shape

    def rhs(_t, y):
        return -grad(y.reshape(shape), emb, task).ravel()

    sol = solve_ivp(rhs, (0.0, float(cfg.t_end)), W0.ravel(), method="RK45",
                    t_eval=ts, rtol=cfg.rtol, atol=cfg.atol)
    W = W0
    for k, t in enumerate(sol.t):
        W = sol.y[:, k].reshape(shape)
        if not rec(t, W):
            return rec.finish(W, "diverged", f"loss above {DIVERGENCE_THRESHOLD:g} at t={t:g}")
    if sol.status != 0:
        return rec.finish(W, "failed", sol.message)
    return rec.finish(W)


_RUNNERS = {"GD": gd_run, "GF": gf_run, "SGD": sgd_run, "SGF": sgf_run}


def run(W0, emb: EmbeddingSet, task: TaskSpec, cfg: DynamicsConfig) -> TrajectoryRecord:
    return _RUNNERS[cfg.kind](W0, emb, task, cfg)


def _expect(cfg: DynamicsConfig, kind: str) -> None:
    if cfg.kind != kind:
        raise ValueError(f"config kind is {cfg.kind!r}, expected {kind!r}")
