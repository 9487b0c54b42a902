"""Self-check: a timed suite of the package invariants.

Each property returns ``(ok, detail)``. ``ops`` lets a caller substitute
core operations (``loss``, ``grad``, ``hvp``) to confirm the suite notices.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import analysis, closed_form, model
from .dynamics import DynamicsConfig, gf_run, make_rng, sgd_run, sgf_run
from .particles import correlations, particle_update, project

__all__ = ["PropertyResult", "PROPERTIES", "verify", "format_report"]

VERIFY_SEED = 7


@dataclass
class PropertyResult:
    name: str
    module: str
    ok: bool
    detail: str
    seconds: float


class _Ctx:
    def __init__(self, strict: bool, ops: Optional[dict]):
        self.strict = strict
        self.closed_tol = 1e-8 if strict else 1e-6
        self.ode_tol = 1e-12 if strict else 1e-10
        self.ops = {"loss": model.loss, "grad": model.grad, "hvp": model.hessian_vector_product}
        self.ops.update(ops or {})

    def rng(self, *stream):
        return make_rng(VERIFY_SEED, *stream)

    def gd(self, W, emb, task, eta, steps):
        g = self.ops["grad"]
        out = [W]
        for _ in range(steps):
            W = W - eta * g(W, emb, task)
            out.append(W)
        return out


def _random_problem(rng, N=None, M=None, d=None):
    N = N or int(rng.integers(1, 7))
    M = M or int(rng.integers(2, 7))
    d = d or int(rng.integers(2, 7))
    emb = model.EmbeddingSet(rng.standard_normal((N, d)), rng.standard_normal((M, d)), {"kind": "gauss"})
    task = model.TaskSpec(rng.integers(0, M, size=N), rng.dirichlet(np.ones(N)))
    return emb, task


# --------------------------------------------------------------------------- model_core


def p_grad_fd(ctx: _Ctx):
    rng, h, worst = ctx.rng(1), 1e-5, 0.0
    for _ in range(50):
        emb, task = _random_problem(rng)
        W = rng.standard_normal((emb.d, emb.d))
        G = ctx.ops["grad"](W, emb, task)
        F = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            D = np.zeros_like(W)
            D[idx] = h
            F[idx] = (ctx.ops["loss"](W + D, emb, task) - ctx.ops["loss"](W - D, emb, task)) / (2 * h)
        worst = max(worst, np.linalg.norm(G - F) / max(np.linalg.norm(F), 1.0))
    return worst <= 1e-6, f"max error {worst:.2e} (relative above unit norm)"


def p_hvp(ctx: _Ctx):
    rng, h, worst, asym = ctx.rng(2), 1e-5, 0.0, 0.0
    g, hvp = ctx.ops["grad"], ctx.ops["hvp"]
    for _ in range(30):
        emb, task = _random_problem(rng)
        W, V, V2 = (rng.standard_normal((emb.d, emb.d)) for _ in range(3))
        HV = hvp(W, emb, task, V)
        F = (g(W + h * V, emb, task) - g(W - h * V, emb, task)) / (2 * h)
        worst = max(worst, np.linalg.norm(HV - F) / max(np.linalg.norm(F), 1e-8))
        asym = max(asym, abs(np.sum(V2 * HV) - np.sum(V * hvp(W, emb, task, V2))))
    return worst <= 1e-5 and asym <= 1e-10, f"relative error {worst:.2e}, asymmetry {asym:.2e}"


def p_convex(ctx: _Ctx):
    rng, worst = ctx.rng(3), math.inf
    for _ in range(30):
        emb, task = _random_problem(rng)
        W, V = rng.standard_normal((emb.d, emb.d)), rng.standard_normal((emb.d, emb.d))
        worst = min(worst, float(np.sum(V * ctx.ops["hvp"](W, emb, task, V))))
    return worst >= -1e-12, f"min <V, HV> = {worst:.2e}"


def p_stable(ctx: _Ctx):
    rng = ctx.rng(4)
    for _ in range(20):
        emb, task = _random_problem(rng)
        W = 1e4 * rng.standard_normal((emb.d, emb.d))
        L, G = ctx.ops["loss"](W, emb, task), ctx.ops["grad"](W, emb, task)
        if not (math.isfinite(L) and np.all(np.isfinite(G))):
            return False, "non-finite loss or gradient at |W| ~ 1e4"
    return True, "finite at |W| ~ 1e4"


def p_gap(ctx: _Ctx):
    rng = ctx.rng(5)
    for _ in range(30):
        emb, task = _random_problem(rng)
        m = model.margins(rng.standard_normal((emb.d, emb.d)), emb, task)
        mask = np.ones_like(m.pairwise, dtype=bool)
        mask[np.arange(emb.N), task.f_star] = False
        if not np.array_equal(m.gap, np.where(mask, m.pairwise, np.inf).min(axis=1)):
            return False, "gap differs from the pairwise minimum"
    return True, "gap equals min over pairwise margins"


# --------------------------------------------------------------------------- particles


def p_particles(ctx: _Ctx):
    rng, worst = ctx.rng(6), 0.0
    for _ in range(5):
        emb, task = _random_problem(rng)
        corr, eta = correlations(emb), 0.1
        W = np.zeros((emb.d, emb.d))
        w = project(W, emb)
        for Wk in ctx.gd(W, emb, task, eta, 100)[1:]:
            w = w + particle_update(w, corr, task, eta)
            worst = max(worst, float(np.max(np.abs(project(Wk, emb).w - w.w))))
    return worst <= 1e-9, f"max deviation {worst:.2e} over 100 steps"


def p_particle_signs(ctx: _Ctx):
    for alpha in (-0.9, -0.5, -0.1, 0.0):
        emb, task = analysis.two_token_problem(alpha, 0.7)
        corr = correlations(emb)
        W = np.zeros((2, 2))
        for _ in range(50):
            m0 = model.margins(W, emb, task).gap
            w = project(W, emb)
            W = W - 0.5 * ctx.ops["grad"](W, emb, task)
            dm = model.margins(W, emb, task).gap - m0
            if np.any(dm < -1e-12):
                return False, f"a margin decreased at alpha={alpha}"
            if not np.allclose(w.w + particle_update(w, corr, task, 0.5), project(W, emb).w, atol=1e-10):
                return False, "particle step disagrees with W step"
    return True, "margins non-decreasing for alpha <= 0"


def p_beta(ctx: _Ctx):
    rng = ctx.rng(7)
    for _ in range(20):
        emb, _ = _random_problem(rng)
        b = correlations(emb).beta
        if not np.array_equal(b, -np.swapaxes(b, 1, 2)):
            return False, "beta_ijk != -beta_ikj"
    return True, "beta antisymmetric in its last two indices"


# --------------------------------------------------------------------------- dynamics


def p_gd_to_gf(ctx: _Ctx):
    emb, task = model.orthonormal_embeddings(3, 3), model.TaskSpec(np.array([0, 1, 2]), np.array([.5, .3, .2]))
    W0 = 0.3 * ctx.rng(8).standard_normal((3, 3))
    T = 2.0
    ref = gf_run(W0, emb, task, DynamicsConfig(kind="GF", t_end=T, rtol=ctx.ode_tol, atol=ctx.ode_tol)).W_final
    gaps = []
    for eta in (0.1, 0.01, 0.001):
        gaps.append(float(np.linalg.norm(ctx.gd(W0, emb, task, eta, int(round(T / eta)))[-1] - ref)))
    ok = gaps[0] > gaps[1] > gaps[2]
    return ok, "gaps " + ", ".join(f"{g:.2e}" for g in gaps)


def _orthogonal_binary(ctx):
    emb = model.orthonormal_embeddings(4, 2)
    task = model.TaskSpec(np.array([0, 1, 0, 1]), np.array([0.4, 0.3, 0.2, 0.1]))
    return emb, task


def p_margin_monotone(ctx: _Ctx):
    emb, task = _orthogonal_binary(ctx)
    Ws = ctx.gd(np.zeros((emb.d, emb.d)), emb, task, 1.0, 500)
    m = np.array([model.margins(W, emb, task).gap for W in Ws])
    ok = bool(np.all(np.diff(m, axis=0) >= -1e-12))
    return ok, f"min increment {np.diff(m, axis=0).min():.2e}"


def p_loss_bound(ctx: _Ctx):
    """GD from zero: ``loss_t <= 2 / (t eta) * sum_x p(x) / c_x`` (``c_x = p(x) |e|^2 |du|^2``)."""
    emb, task = _orthogonal_binary(ctx)
    c = task.p * np.sum(emb.E ** 2, axis=1) * np.sum((emb.U[0] - emb.U[1]) ** 2)
    worst = 0.0
    for eta in (0.1, 1.0):
        Ws = ctx.gd(np.zeros((emb.d, emb.d)), emb, task, eta, 1000)
        for t, W in enumerate(Ws[1:], start=1):
            bound = 2.0 / (t * eta) * np.sum(task.p / c)
            worst = max(worst, ctx.ops["loss"](W, emb, task) / bound)
    return worst <= 1.0, f"max loss / bound {worst:.4f}"


def p_margin_growth(ctx: _Ctx):
    emb, task = _orthogonal_binary(ctx)
    c = task.p * np.sum(emb.E ** 2, axis=1) * np.sum((emb.U[0] - emb.U[1]) ** 2)
    worst = math.inf
    for eta in (0.1, 1.0, 5.0):
        Ws = ctx.gd(np.zeros((emb.d, emb.d)), emb, task, eta, 1000)
        for t, W in enumerate(Ws):
            m = model.margins(W, emb, task).gap
            worst = min(worst, float(np.min(np.exp(m) - (eta * c * t / 2 + 1))))
    return worst >= -1e-9, f"min exp(m) - bound {worst:.2e}"


def p_span(ctx: _Ctx):
    rng = ctx.rng(9)
    emb = model.EmbeddingSet(rng.standard_normal((3, 5)), rng.standard_normal((3, 5)), {"kind": "gauss"})
    task = model.TaskSpec(np.array([0, 1, 2]), np.array([.5, .3, .2]))
    P_out, P_in = model.update_span_projectors(emb)
    W0 = rng.standard_normal((5, 5))
    perp = lambda W: W - P_out @ W @ P_in
    runs = {
        "GD": ctx.gd(W0, emb, task, 0.5, 50)[-1],
        "SGD": sgd_run(W0, emb, task, DynamicsConfig(kind="SGD", eta=0.5, t_end=50, seed=VERIFY_SEED)).W_final,
        "SGF": sgf_run(W0, emb, task, DynamicsConfig(kind="SGF", t_end=1.0, sigma=0.5, h=0.01,
                                                    seed=VERIFY_SEED)).W_final,
    }
    worst = max(float(np.max(np.abs(perp(W) - perp(W0)))) for W in runs.values())
    return worst <= 1e-10, f"max drift of the orthogonal component {worst:.2e}"


# --------------------------------------------------------------------------- closed_form


def p_lambert(ctx: _Ctx):
    x = np.concatenate([-1 / math.e + np.logspace(-12, -1, 20), np.linspace(-0.3, 5, 60), np.logspace(1, 300, 40)])
    w = closed_form.lambert_w0(x)
    err = np.abs(w * np.exp(w) - x) / np.maximum(np.abs(x), 1e-300)
    return float(err.max()) <= 1e-11, f"max relative round-trip error {err.max():.2e}"


def p_sandwich(ctx: _Ctx):
    worst = math.inf
    for c in (0.1, 1.0, 3.0):
        for m0 in (-2.0, 0.0, 2.0):
            inst = closed_form.BinaryOrthogonalInstance(c, m0)
            for x in np.logspace(0, 8, 50):
                t = inst.t0 + x / c
                lo, hi = closed_form.h_bound(x)
                gap = math.log(x) - closed_form.binary_margin_closed(inst, t)
                worst = min(worst, gap - lo + 1e-12, hi - gap + 1e-12)
    return worst >= 0, f"min slack {worst:.2e}"


def p_closed_vs_flow(ctx: _Ctx):
    from .experiments import binary_instance

    rng, worst = ctx.rng(10), 0.0
    times = tuple(np.linspace(0, 1000, 101))
    for _ in range(10):
        c, m0 = float(rng.uniform(0.2, 3.0)), float(rng.uniform(-2.0, 2.0))
        emb, task, W0 = binary_instance(c, m0)
        rec = gf_run(W0, emb, task, DynamicsConfig(kind="GF", t_end=1000, record_times=times,
                                                   rtol=ctx.ode_tol, atol=ctx.ode_tol))
        inst = closed_form.BinaryOrthogonalInstance(c, m0)
        ref = np.array([closed_form.binary_margin_closed(inst, t) for t in rec.times])
        worst = max(worst, float(np.max(np.abs(ref - rec.margins[:, 0]))))
    return worst <= ctx.closed_tol, f"sup error {worst:.2e} (tolerance {ctx.closed_tol:g})"


def p_gamma_flow(ctx: _Ctx):
    from scipy.integrate import solve_ivp

    for alpha in (-0.5, 0.0, 0.5, 0.9):
        inst = closed_form.TwoTokenInstance(0.75, 0.25, alpha)
        sol = solve_ivp(lambda t, y: closed_form.gamma_ode_rhs(inst, *y), (0, 200), [0.0, 0.0],
                        rtol=1e-9, atol=1e-12, dense_output=True)
        g2 = sol.sol(np.linspace(0, 200, 400))[1]
        if np.any(np.diff(g2) <= 0):
            return False, f"gamma2 not increasing at alpha={alpha}"
    return True, "gamma2 strictly increasing"


def p_sign_rule(ctx: _Ctx):
    inst = closed_form.TwoTokenInstance(0.8, 0.2, 0.3)
    bad = 0
    for g1 in np.linspace(-3, 3, 41):
        for g2 in np.linspace(-2, 4, 41):
            d1, _ = closed_form.gamma_ode_rhs(inst, g1, g2)
            lhs = math.sinh(g1 - inst.gamma_bar) - closed_form.sinh_threshold(inst, g2)
            if abs(lhs) > 1e-9 and (d1 <= 0) != (lhs >= 0):
                bad += 1
    return bad == 0, f"{bad} sign disagreements on a 41x41 grid"


def p_spike(ctx: _Ctx):
    worst = math.inf
    for alpha in np.linspace(0.05, 0.99, 12):
        for p1 in np.linspace(0.55, 0.95, 9):
            emb, task = analysis.two_token_problem(alpha, p1)
            inst = closed_form.TwoTokenInstance(p1, 1 - p1, alpha)
            for eta in (0.5, 1.0, 5.0, 10.0, 50.0):
                b = closed_form.spike_lower_bound(inst, eta)
                if b.applicable:
                    W1 = ctx.gd(np.zeros((2, 2)), emb, task, eta, 1)[1]
                    worst = min(worst, ctx.ops["loss"](W1, emb, task) - b.value)
    return worst >= -1e-12, f"min L(W1) - bound {worst:.2e}"


def p_invariants(ctx: _Ctx):
    emb = model.orthonormal_embeddings(3, 4)
    task = model.TaskSpec(np.array([0, 1, 3]), np.array([.5, .3, .2]))
    W0 = 0.2 * ctx.rng(11).standard_normal((4, 4))
    rec = gf_run(W0, emb, task, DynamicsConfig(kind="GF", t_end=50, record_every=5,
                                               rtol=ctx.ode_tol, atol=ctx.ode_tol))
    s0, s1 = model.scores(W0, emb), model.scores(rec.W_final, emb)
    worst = 0.0
    for x in range(emb.N):
        a = closed_form.multiclass_invariants(s0[x], task.f_star[x])
        b = closed_form.multiclass_invariants(s1[x], task.f_star[x])
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst <= 1e-6, f"max drift {worst:.2e}"


# --------------------------------------------------------------------------- analysis


def p_power(ctx: _Ctx):
    rng, worst = ctx.rng(12), 0.0
    for _ in range(10):
        emb, task = _random_problem(rng, d=int(rng.integers(2, 6)))
        W = rng.standard_normal((emb.d, emb.d))
        dense = float(np.linalg.eigvalsh(model.dense_hessian(W, emb, task))[-1])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", analysis.SharpnessWarning)
            lam = analysis.sharpness(W, emb, task)
        worst = max(worst, abs(lam - dense) / max(dense, 1e-12))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def p_landscape(ctx: _Ctx):
    emb, task = analysis.two_token_problem(0.6, 0.75)
    spec = analysis.GridSpec((-4, 4), (-4, 4), resolution=201)
    grid = analysis.landscape(emb, task, spec)
    worst = 0.0
    for W in ctx.gd(np.zeros((2, 2)), emb, task, 1.0, 20)[1:]:
        g = analysis.gamma_coords(W, emb)
        if max(abs(g.gamma1), abs(g.gamma2)) < 4:
            L = ctx.ops["loss"](W, emb, task)
            worst = max(worst, abs(analysis.interpolate(grid, grid.loss, g.gamma1, g.gamma2) - L))
    return worst <= 1e-3, f"max interpolation error {worst:.2e}"


def p_sharp_decay(ctx: _Ctx):
    emb, task = analysis.two_token_problem(0.5, 0.75)
    rec = gf_run(np.zeros((2, 2)), emb, task, DynamicsConfig(kind="GF", t_end=1e4, record_times=(1e4,)))
    lam = analysis.sharpness(rec.W_final, emb, task)
    return lam < 1e-3, f"sharpness at t=1e4: {lam:.2e}"


def p_oscillation(ctx: _Ctx):
    emb, task = analysis.witness_instance()
    Ws = ctx.gd(np.zeros((2, 2)), emb, task, 10.0, 400)
    sh = np.array([analysis.sharpness(W, emb, task) for W in Ws[200:]])
    nonmono = bool(np.any(np.diff(sh) > 0) and np.any(np.diff(sh) < 0))
    return nonmono and sh.min() > 0, f"sharpness range [{sh.min():.3f}, {sh.max():.3f}] over steps 200-400"


PROPERTIES: list[tuple[str, str, Callable]] = [
    ("model_core", "gradient vs central differences", p_grad_fd),
    ("model_core", "HVP vs gradient differences, symmetry", p_hvp),
    ("model_core", "convexity", p_convex),
    ("model_core", "softmax stability", p_stable),
    ("model_core", "gap is the minimum pairwise margin", p_gap),
    ("particles", "particle and weight updates agree", p_particles),
    ("particles", "non-positive correlation keeps margins rising", p_particle_signs),
    ("particles", "beta antisymmetry", p_beta),
    ("dynamics", "GD approaches GF as eta shrinks", p_gd_to_gf),
    ("dynamics", "orthogonal margins non-decreasing", p_margin_monotone),
    ("dynamics", "GD loss bound", p_loss_bound),
    ("dynamics", "GD margin growth", p_margin_growth),
    ("dynamics", "updates stay in the update span", p_span),
    ("closed_form", "Lambert W round trip", p_lambert),
    ("closed_form", "margin sandwich", p_sandwich),
    ("closed_form", "closed form vs adaptive flow", p_closed_vs_flow),
    ("closed_form", "gamma2 increasing along the reduced flow", p_gamma_flow),
    ("closed_form", "gamma1 sign rule", p_sign_rule),
    ("closed_form", "first-step spike bound", p_spike),
    ("closed_form", "multi-class invariants", p_invariants),
    ("analysis", "power iteration vs dense eigensolver", p_power),
    ("analysis", "landscape matches trajectories", p_landscape),
    ("analysis", "overparameterized sharpness decays", p_sharp_decay),
    ("analysis", "underparameterized sharpness oscillates", p_oscillation),
]


def verify(strict: bool = False, ops: Optional[dict] = None) -> list[PropertyResult]:
    ctx = _Ctx(strict, ops)
    out = []
    for module, name, fn in PROPERTIES:
        start = time.perf_counter()
        try:
            ok, detail = fn(ctx)
        except Exception as exc:  # a crash is a failure, reported with its message
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(PropertyResult(name, module, bool(ok), detail, time.perf_counter() - start))
    return out


def format_report(results: list[PropertyResult]) -> str:
    lines = [f"{'PASS' if r.ok else 'FAIL'}  {r.module:<12} {r.name:<48} {r.seconds:7.2f}s  {r.detail}"
             for r in results]
    n_ok = sum(r.ok for r in results)
    lines.append(f"{n_ok}/{len(results)} properties passed in {sum(r.seconds for r in results):.1f}s")
    return "\n".join(lines)
