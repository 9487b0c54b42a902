import math

import numpy as np
import pytest

from assocmem import model
from assocmem.dynamics import (DynamicsConfig, gd_run, gf_run, make_rng, run, sgd_run, sgd_step, sgf_run,
                               sgf_step)
from assocmem.model import EmbeddingSet, TaskSpec


def small_problem():
    emb = model.orthonormal_embeddings(3, 3)
    task = TaskSpec([0, 1, 2], [0.5, 0.3, 0.2])
    return emb, task


def test_rng_streams_are_reproducible_and_distinct():
    a = make_rng(5, 1).standard_normal(4)
    np.testing.assert_array_equal(a, make_rng(5, 1).standard_normal(4))
    assert not np.allclose(a, make_rng(5, 2).standard_normal(4))
    assert not np.allclose(a, make_rng(6, 1).standard_normal(4))


def test_gd_matches_manual_loop():
    emb, task = small_problem()
    W = np.zeros((3, 3))
    for _ in range(10):
        W = W - 0.7 * model.grad(W, emb, task)
    rec = gd_run(np.zeros((3, 3)), emb, task, DynamicsConfig(kind="GD", eta=0.7, t_end=10))
    np.testing.assert_array_equal(rec.W_final, W)
    assert rec.times.tolist() == list(range(11))
    assert rec.status == "ok"


def test_gd_schedule_and_short_schedule():
    emb, task = small_problem()
    rec = gd_run(np.zeros((3, 3)), emb, task, DynamicsConfig(kind="GD", eta=[1.0, 0.0, 0.0], t_end=3))
    assert rec.loss[1] == rec.loss[2] == rec.loss[3]
    with pytest.raises(ValueError):
        gd_run(np.zeros((3, 3)), emb, task, DynamicsConfig(kind="GD", eta=[1.0], t_end=3))


def test_gd_converges_to_gf_with_first_order_error():
    emb, task = small_problem()
    W0 = 0.3 * make_rng(0).standard_normal((3, 3))
    ref = gf_run(W0, emb, task, DynamicsConfig(kind="GF", t_end=2.0, rtol=1e-11, atol=1e-11)).W_final
    errs = [np.linalg.norm(gd_run(W0, emb, task, DynamicsConfig(kind="GD", eta=eta, t_end=round(2 / eta))).W_final
                           - ref) for eta in (0.1, 0.01, 0.001)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[1] / errs[2] == pytest.approx(10, rel=0.05)


def test_gf_record_times_and_zero_horizon():
    emb, task = small_problem()
    rec = gf_run(np.zeros((3, 3)), emb, task, DynamicsConfig(kind="GF", t_end=5, record_every=0.5))
    np.testing.assert_allclose(rec.times, np.arange(11) * 0.5)
    assert np.all(np.diff(rec.loss) < 0)
    rec0 = gf_run(np.zeros((3, 3)), emb, task, DynamicsConfig(kind="GF", t_end=0))
    assert rec0.times.tolist() == [0.0]


def test_sgd_full_batch_limit_and_reproducibility():
    emb, task = small_problem()
    cfg = DynamicsConfig(kind="SGD", eta=0.5, t_end=30, batch_size=8, seed=4, stream=(1,))
    a, b = sgd_run(np.zeros((3, 3)), emb, task, cfg), sgd_run(np.zeros((3, 3)), emb, task, cfg)
    np.testing.assert_array_equal(a.W_final, b.W_final)
    c = sgd_run(np.zeros((3, 3)), emb, task, DynamicsConfig(kind="SGD", eta=0.5, t_end=30, batch_size=8, seed=5))
    assert not np.allclose(a.W_final, c.W_final)


def test_sgd_step_is_unbiased_monte_carlo():
    """Average of many one-token steps equals the full-batch step (to sampling error)."""
    rng = np.random.default_rng(0)
    emb = EmbeddingSet(rng.standard_normal((4, 3)), rng.standard_normal((3, 3)))
    task = TaskSpec([0, 1, 2, 1], [0.4, 0.3, 0.2, 0.1])
    W = rng.standard_normal((3, 3))
    gen = make_rng(1, 0)
    n = 20000
    batches = gen.choice(4, size=(n, 1), p=task.p)
    mean = sum(sgd_step(W, emb, task, 1.0, b) for b in batches) / n
    full = W - model.grad(W, emb, task)
    per = np.stack([sgd_step(W, emb, task, 1.0, [x]) for x in range(4)])
    sd = np.sqrt(np.einsum("x,xij->ij", task.p, (per - full) ** 2) / n)
    assert np.all(np.abs(mean - full) <= 5 * sd + 1e-12)


def test_sgf_noise_covariance_monte_carlo():
    """At a flat point the one-step increment is sigma sqrt(h) P_out G P_in."""
    emb, task = small_problem()
    P_out, P_in = model.update_span_projectors(emb)
    h, sigma = 0.04, 0.5
    gen = make_rng(2, 0)
    W = np.zeros((3, 3))
    G0 = model.grad(W, emb, task)
    n = 20000
    incs = np.stack([sgf_step(W, emb, task, h, sigma, gen.standard_normal((3, 3)), (P_out, P_in)) + h * G0
                     for _ in range(n)])
    var = incs.reshape(n, -1).var(axis=0).sum()
    expected = sigma ** 2 * h * np.trace(P_out) * np.trace(P_in)
    assert var == pytest.approx(expected, rel=0.03)
    assert np.abs(incs.mean(axis=0)).max() < 5 * sigma * math.sqrt(h / n)


def test_sgf_zero_noise_is_euler():
    emb, task = small_problem()
    cfg = DynamicsConfig(kind="SGF", t_end=1.0, h=0.1, sigma=0.0, record_every=0.1)
    rec = sgf_run(np.zeros((3, 3)), emb, task, cfg)
    W = np.zeros((3, 3))
    for _ in range(10):
        W = W - 0.1 * model.grad(W, emb, task)
    np.testing.assert_allclose(rec.W_final, W, atol=1e-14)
    np.testing.assert_allclose(rec.times, np.arange(11) * 0.1)


def test_runs_preserve_component_outside_update_span():
    rng = np.random.default_rng(3)
    emb = EmbeddingSet(rng.standard_normal((2, 4)), rng.standard_normal((3, 4)))
    task = TaskSpec([0, 2], [0.6, 0.4])
    P_out, P_in = model.update_span_projectors(emb)
    W0 = rng.standard_normal((4, 4))
    perp = lambda W: W - P_out @ W @ P_in
    for cfg in (DynamicsConfig(kind="GD", t_end=20), DynamicsConfig(kind="SGD", t_end=20, seed=1),
                DynamicsConfig(kind="SGF", t_end=0.5, sigma=1.0, seed=1), DynamicsConfig(kind="GF", t_end=5)):
        np.testing.assert_allclose(perp(run(W0, emb, task, cfg).W_final), perp(W0), atol=1e-7)


def test_divergence_is_reported():
    rng = np.random.default_rng(0)
    emb = EmbeddingSet(rng.standard_normal((3, 2)), rng.standard_normal((2, 2)))
    task = TaskSpec([0, 1, 0], [0.3, 0.3, 0.4])
    rec = gd_run(np.zeros((2, 2)), emb, task, DynamicsConfig(kind="GD", eta=1e15, t_end=50))
    assert rec.diverged and "step" in rec.message
    assert np.all(np.isfinite(rec.loss))


def test_record_csv_format():
    emb, task = small_problem()
    rec = gd_run(np.zeros((3, 3)), emb, task, DynamicsConfig(kind="GD", t_end=4, record_every=2, sharpness=True))
    text = rec.to_csv()
    lines = text.split("\n")
    assert lines[0] == "t,loss,zero_one,margin_1,margin_2,margin_3,sharpness"
    assert len(lines) == 5 and lines[-1] == "" and "\r" not in text
    assert float(lines[1].split(",")[1]) == rec.loss[0]


def test_config_validation():
    with pytest.raises(ValueError):
        DynamicsConfig(kind="Adam")
    with pytest.raises(ValueError):
        DynamicsConfig(eta=-1.0)
    with pytest.raises(ValueError):
        DynamicsConfig(batch_size=0)
    with pytest.raises(ValueError):
        gd_run(np.zeros((3, 3)), *small_problem(), DynamicsConfig(kind="GF"))
