"""Acceptance criteria, one test each; every test prints a PASS/FAIL line with its measurement."""
import math
import time

import numpy as np
import pytest

from assocmem import analysis, closed_form as cf, model
from assocmem.dynamics import DynamicsConfig, gd_run, gf_run, make_rng
from assocmem.experiments import FIG4_ALPHAS, FIG4_ETAS, binary_instance, fig6_checks, fig6_replica
from assocmem.model import TaskSpec

SEED = 20240601


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return _report


def test_01_closed_form_fidelity(report):
    rng = make_rng(SEED, 1)
    start = time.perf_counter()
    worst = 0.0
    times = tuple(np.linspace(0.0, 1000.0, 1001))
    for _ in range(10):
        c, m0 = float(rng.uniform(0.1, 5.0)), float(rng.uniform(-2.0, 2.0))
        emb, task, W0 = binary_instance(c, m0)
        rec = gf_run(W0, emb, task, DynamicsConfig(kind="GF", t_end=1000.0, record_times=times))
        inst = cf.BinaryOrthogonalInstance(c, m0)
        ref = np.array([cf.binary_margin_closed(inst, t) for t in rec.times])
        worst = max(worst, float(np.max(np.abs(ref - rec.margins[:, 0]))))
    secs = time.perf_counter() - start
    report(1, worst <= 1e-5 and secs < 10, f"sup error {worst:.2e} (<= 1e-5), {secs:.1f}s (< 10s)")


def test_02_sandwich(report):
    inst = cf.BinaryOrthogonalInstance(1.0, 0.0)  # t0 = -1, so x = t + 1
    bad = 0
    for x in np.logspace(0, 6, 1000):
        gap = math.log(x) - cf.binary_margin_closed(inst, x - 1.0)
        lo, hi = cf.h_bound(x)
        bad += not (lo <= gap <= hi)
    report(2, bad == 0, f"{bad} of 1000 points outside [0, 2 log(x)/x]")


def test_03_gd_loss_bound(report):
    emb = model.orthonormal_embeddings(4, 2)
    task = TaskSpec([0, 1, 0, 1], [0.25] * 4)
    c = task.p * np.sum(emb.E ** 2, axis=1) * np.sum((emb.U[0] - emb.U[1]) ** 2)
    worst, first = 0.0, None
    for eta in (0.1, 1.0):
        rec = gd_run(np.zeros((4, 4)), emb, task, DynamicsConfig(kind="GD", eta=eta, t_end=10 ** 4))
        t = rec.times[1:]
        ratio = rec.loss[1:] / (np.sum(task.p / c) / (t * eta))
        worst = max(worst, float(ratio.max()))
        if first is None and np.any(ratio > 1):
            first = (eta, int(t[np.argmax(ratio > 1)]))
    detail = f"max loss/bound {worst:.4f} (<= 1)"
    if first:
        detail += f"; first violation eta={first[0]:g} at t={first[1]}"
    report(3, worst <= 1.0, detail)


def test_04_asymptotic_direction(report):
    emb = model.orthonormal_embeddings(3, 3)
    task = TaskSpec([0, 1, 2], [1 / 3] * 3)
    W0 = 0.5 * make_rng(SEED, 4).standard_normal((3, 3))
    start = time.perf_counter()
    rec = gf_run(W0, emb, task, DynamicsConfig(kind="GF", t_end=1e6, record_times=(1e6,)))
    secs = time.perf_counter() - start
    P_out, P_in = model.update_span_projectors(emb)
    W = rec.W_final - (W0 - P_out @ W0 @ P_in)
    D = cf.asymptotic_direction(emb, task).direction
    cos = float(np.sum(W * D) / (np.linalg.norm(W) * np.linalg.norm(D)))
    report(4, cos >= 0.999 and secs < 60, f"cosine {cos:.7f} (>= 0.999), {secs:.2f}s (< 60s)")


def test_05_two_token_gamma(report):
    p1, alpha = 0.75, 0.5
    emb, task = analysis.two_token_problem(alpha, p1)
    inst = cf.TwoTokenInstance(p1, 1 - p1, alpha)
    flow = gf_run(np.zeros((2, 2)), emb, task,
                  DynamicsConfig(kind="GF", t_end=1e4, record_times=(1e4,), gamma="theory"))
    g_err = abs(flow.gamma[-1, 0] - 0.5 * math.log(3))
    env = cf.gd_gamma_bounds(inst, 1.0)
    rec = gd_run(np.zeros((2, 2)), emb, task, DynamicsConfig(kind="GD", eta=1.0, t_end=10 ** 4, gamma="theory"))
    g1, g2 = rec.gamma[:, 0], rec.gamma[:, 1]
    in_env = bool(np.all(g1 >= env.gamma_min) and np.all(g1 <= env.gamma_max))
    slack = min(math.exp(b) - env.gamma2_lower(t) for t, b in zip(rec.times, g2))
    ok = g_err <= 1e-2 and in_env and slack >= 0
    report(5, ok, f"|gamma1(1e4) - log(3)/2| = {g_err:.2e}; GD gamma1 in [{g1.min():.3f}, {g1.max():.3f}] "
                  f"within [{env.gamma_min:.3f}, {env.gamma_max:.3f}]; min exp(gamma2) - bound {slack:.3f}")


def test_06_spike(report):
    cases = [(eta, a, p1) for eta in (1.0, 5.0, 10.0) for a in (0.6, 0.8, 0.95) for p1 in (0.7, 0.75, 0.8, 0.9)]
    assert len(cases) == 36 and all(a * p1 > 1 - p1 for _, a, p1 in cases)
    bound_slack = chain_slack = math.inf
    for eta, a, p1 in cases:
        emb, task = analysis.two_token_problem(a, p1)
        W1 = -eta * model.grad(np.zeros((2, 2)), emb, task)
        L = model.loss(W1, emb, task)
        b = cf.spike_lower_bound(cf.TwoTokenInstance(p1, 1 - p1, a), eta)
        m2 = model.margins(W1, emb, task).gap[1]
        bound_slack = min(bound_slack, L - b.value)
        chain_slack = min(chain_slack, L + (1 - p1) * m2)
    emb, task = analysis.two_token_problem(0.95, 0.75)
    L_fig = model.loss(-10.0 * model.grad(np.zeros((2, 2)), emb, task), emb, task)
    ok = bound_slack >= 0 and chain_slack >= 0 and L_fig >= 1.15625
    report(6, ok, f"min L(W1) - bound {bound_slack:.4f}; min L(W1) + p2 m2 {chain_slack:.4f}; "
                  f"eta=10 instance L(W1) = {L_fig:.5f} (>= 1.15625)")


def test_07_one_step(report):
    rng = make_rng(SEED, 7)
    bad = 0
    for N in range(2, 17):
        emb = model.orthonormal_embeddings(N, N)
        for eta in (1e-8, 1e-3, 0.5, 1.0, 100.0, 1e6):
            task = TaskSpec(rng.integers(0, N, size=N), rng.dirichlet(np.ones(N)))
            W1 = -eta * model.grad(np.zeros((N, N)), emb, task)
            bad += model.zero_one_loss(W1, emb, task) != 0.0
    report(7, bad == 0, f"{bad} of {15 * 6} (N, eta) cases with nonzero 0-1 loss after one step")


def test_08_invariants(report):
    emb = model.orthonormal_embeddings(4, 4)
    task = TaskSpec([0, 1, 2, 3], [0.4, 0.3, 0.2, 0.1])
    W0 = make_rng(SEED, 8).standard_normal((4, 4))
    S0 = model.scores(W0, emb)
    worst, Wt = 0.0, W0
    # unit-length flow segments so the state is available at every integer time
    for _ in range(100):
        Wt = gf_run(Wt, emb, task, DynamicsConfig(kind="GF", t_end=1.0, record_times=(1.0,))).W_final
        St = model.scores(Wt, emb)
        for x in range(4):
            worst = max(worst, float(np.max(np.abs(cf.multiclass_invariants(St[x], x)
                                                   - cf.multiclass_invariants(S0[x], x)))))
    report(8, worst <= 1e-6, f"max drift {worst:.2e} (<= 1e-6) over t in [0, 100]")


def test_09_oracles(report):
    rng = make_rng(SEED, 9)
    start = time.perf_counter()
    g_err = h_err = p_err = 0.0
    for _ in range(50):
        N, M, d = (int(v) for v in rng.integers(2, 7, size=3))
        emb = model.EmbeddingSet(rng.standard_normal((N, d)), rng.standard_normal((M, d)))
        task = TaskSpec(rng.integers(0, M, size=N), rng.dirichlet(np.ones(N)))
        W, V = rng.standard_normal((d, d)), rng.standard_normal((d, d))
        h = 1e-5
        F = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            D = np.zeros_like(W)
            D[idx] = h
            F[idx] = (model.loss(W + D, emb, task) - model.loss(W - D, emb, task)) / (2 * h)
        g_err = max(g_err, np.linalg.norm(model.grad(W, emb, task) - F) / max(np.linalg.norm(F), 1.0))
        FH = (model.grad(W + h * V, emb, task) - model.grad(W - h * V, emb, task)) / (2 * h)
        HV = model.hessian_vector_product(W, emb, task, V)
        h_err = max(h_err, np.linalg.norm(HV - FH) / max(np.linalg.norm(FH), 1.0))
        dense = float(np.linalg.eigvalsh(model.dense_hessian(W, emb, task))[-1])
        p_err = max(p_err, abs(analysis.sharpness(W, emb, task) - dense) / dense)
    secs = time.perf_counter() - start
    ok = g_err <= 1e-6 and h_err <= 1e-5 and p_err <= 1e-8 and secs < 30
    report(9, ok, f"grad {g_err:.1e} (<= 1e-6), HVP {h_err:.1e} (<= 1e-5), "
                  f"power iteration {p_err:.1e} (<= 1e-8), {secs:.1f}s (< 30s)")


def test_10_calibration_failure(report):
    emb, task = analysis.witness_instance()
    res = analysis.excess_risk(emb, task)
    report(10, res.value > 0, f"excess risk {res.value:.6f} (> 0) for witness seed {analysis.WITNESS_SEED}, "
                              f"index {analysis.WITNESS_INDEX}; min L01 {res.min_zero_one:.6f}")


def test_11_phase_diagram(report):
    start = time.perf_counter()
    pd = analysis.phase_diagram(analysis.PhaseSpec(FIG4_ETAS, "alpha", FIG4_ALPHAS, p1=0.75), jobs=8)
    secs = time.perf_counter() - start
    alphas, steps = np.asarray(FIG4_ALPHAS), pd.steps
    ones = bool(np.all(steps[:, alphas <= 0] == 1))
    moderate = FIG4_ETAS.index(1.0)
    row = steps[moderate, alphas > 0]
    increasing = bool(np.all(np.diff(row) > 0))
    corner, mid = int(steps[-1, -1]), int(steps[moderate, -1])
    ok = ones and increasing and corner > mid and secs < 300
    report(11, ok, f"alpha<=0 all one step: {ones}; eta=1 row over alpha>0 {row.tolist()} increasing: "
                   f"{increasing}; corner (eta={FIG4_ETAS[-1]:g}, alpha={FIG4_ALPHAS[-1]}) {corner} steps vs "
                   f"eta=1 {mid} steps; {secs:.1f}s")


def test_12_figure6(report):
    seeds = range(5)
    per_seed = []
    for s in seeds:
        per_seed.append(fig6_checks(fig6_replica(SEED + s)))
    holds = [all(c.values()) for c in per_seed]
    counts = {k: sum(c[k] for c in per_seed) for k in per_seed[0]}
    report(12, sum(holds) >= 4, f"all claims hold for {sum(holds)}/5 seeds (>= 4); per claim {counts}")
