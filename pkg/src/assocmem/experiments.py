"""Experiment commands, the ``fig1`` ... ``fig6`` registry, and run serialization."""
from __future__ import annotations

import json
import math
import os
import platform
import subprocess
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from . import analysis, closed_form, svg
from .config import build_embeddings, build_task, default_output_dir, parse_config
from .dynamics import DynamicsConfig, TrajectoryRecord, format_float, gd_run, gf_run, make_rng, run, sgd_run
from .model import EmbeddingSet, TaskSpec, sphere_embeddings

__all__ = ["RunResult", "Experiment", "REGISTRY", "COMMANDS", "run_experiment", "reproduce",
           "atomic_write", "version_string", "fig6_replica", "fig6_checks"]


@dataclass
class RunResult:
    out_dir: Path
    files: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def atomic_write(path: Path, text: str) -> Path:
    """Write ``text`` to ``path`` through a temporary file and rename (LF line endings)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def grid_csv(name1: str, a1, name2: str, a2, value_name: str, values) -> str:
    lines = [f"{name1},{name2},{value_name}"]
    for i, x in enumerate(a1):
        for j, y in enumerate(a2):
            lines.append(f"{format_float(x)},{format_float(y)},{format_float(values[i, j])}")
    return "\n".join(lines) + "\n"


class _Writer:
    def __init__(self, out: Path):
        self.out = Path(out)
        self.files: list[Path] = []

    def __call__(self, name: str, text: str) -> Path:
        p = atomic_write(self.out / name, text)
        self.files.append(p)
        return p


# --------------------------------------------------------------------------- config commands


def _dynamics_config(cfg: dict, **over) -> DynamicsConfig:
    d = dict(cfg.get("dynamics", {}))
    d.update(over)
    eta = d.get("eta", 1.0)
    sigma = d.get("sigma", 0.0)
    return DynamicsConfig(
        kind=d.get("kind", "GD"),
        eta=tuple(eta) if isinstance(eta, list) else float(eta),
        t_end=d.get("t_end", 100),
        batch_size=d.get("batch_size", 1),
        sigma=tuple(sigma) if isinstance(sigma, list) else float(sigma),
        h=float(d.get("h", 1e-2)),
        seed=int(cfg.get("seed", 0)),
        stream=(1,),
        record_every=d.get("record_every", 1),
        gamma=d.get("gamma"),
        sharpness=d.get("sharpness", False),
    )


def _initial_weights(cfg: dict, emb: EmbeddingSet) -> np.ndarray:
    d = cfg.get("dynamics", {})
    if d.get("init", "zero") == "zero":
        return np.zeros((emb.d, emb.d))
    rng = make_rng(int(cfg.get("seed", 0)), 2)
    return float(d.get("init_scale", 1.0)) * rng.standard_normal((emb.d, emb.d))


def cmd_simulate(cfg: dict, write: _Writer, jobs: int) -> dict:
    emb, task = build_embeddings(cfg), build_task(cfg)
    dcfg = _dynamics_config(cfg)
    rec = run(_initial_weights(cfg, emb), emb, task, dcfg)
    write("trajectory.csv", rec.to_csv())
    logx = dcfg.kind in ("GD", "SGD") and rec.times[-1] >= 10
    t = np.maximum(rec.times, 1) if logx else rec.times
    write("loss.svg", svg.line_plot_svg([("loss", t, rec.loss), ("0-1 loss", t, rec.zero_one)],
                                        title=f"{dcfg.kind} loss", xlabel="t", ylabel="loss", logx=logx))
    write("margins.svg", svg.line_plot_svg(
        [(f"x={i + 1}", t, rec.margins[:, i]) for i in range(emb.N)],
        title="gap margins", xlabel="t", ylabel="margin", logx=logx, hlines=(0.0,)))
    return {"status": rec.status, "message": rec.message, "final_loss": float(rec.loss[-1]),
            "final_zero_one": float(rec.zero_one[-1])}


def _grid_spec(cfg: dict) -> analysis.GridSpec:
    g = cfg.get("landscape", {})
    return analysis.GridSpec(tuple(g.get("gamma1_range", (-10.0, 10.0))),
                             tuple(g.get("gamma2_range", (-10.0, 10.0))),
                             g.get("resolution", 512), g.get("basis", "canonical"),
                             g.get("sharpness", False))


def _write_landscape(write: _Writer, prefix: str, grid: analysis.LandscapeGrid, title: str,
                     overlays=()) -> None:
    for name, values in grid.fields().items():
        write(f"{prefix}_{name}.csv", grid_csv("gamma1", grid.gamma1, "gamma2", grid.gamma2, name, values))
    levels = np.quantile(grid.loss, np.linspace(0.02, 0.98, 14))
    write(f"{prefix}_landscape.svg", svg.heatmap_svg(
        grid.gamma1, grid.gamma2, 1.0 - grid.zero_one, contour_field=grid.loss, levels=levels,
        title=title, xlabel="gamma1", ylabel="gamma2", overlays=overlays))
    if grid.sharpness is not None:
        write(f"{prefix}_sharpness.svg", svg.heatmap_svg(
            grid.gamma1, grid.gamma2, grid.sharpness, contour_field=grid.sharpness,
            levels=np.quantile(grid.sharpness, np.linspace(0.05, 0.95, 10)),
            title=title + " (sharpness)", xlabel="gamma1", ylabel="gamma2", overlays=overlays))


def cmd_landscape(cfg: dict, write: _Writer, jobs: int) -> dict:
    emb, task = build_embeddings(cfg), build_task(cfg)
    grid = analysis.landscape(emb, task, _grid_spec(cfg))
    _write_landscape(write, "grid", grid, "loss level lines / accuracy")
    return {"perfect_accuracy_cells": int(np.sum(grid.zero_one == 0)),
            "min_loss": float(grid.loss.min())}


def _phase_spec(cfg: dict) -> analysis.PhaseSpec:
    ph = cfg.get("phase", {})
    return analysis.PhaseSpec(
        etas=tuple(float(v) for v in ph.get("etas", (0.01, 0.1, 1.0, 10.0))),
        second_axis=ph.get("axis", "alpha"),
        values=tuple(float(v) for v in ph.get("values", (-0.5, 0.0, 0.5, 0.9))),
        p1=float(ph.get("p1", 0.75)), alpha=float(ph.get("alpha", 0.5)),
        cap=int(ph.get("cap", 10 ** 6)))


def _write_phase(write: _Writer, prefix: str, pd: analysis.PhaseDiagram) -> None:
    write(f"{prefix}.csv", grid_csv("eta", pd.etas, pd.second_axis, pd.values, "steps", pd.steps))
    write(f"{prefix}.svg", svg.heatmap_svg(
        pd.etas, pd.values, pd.steps.astype(float), log_color=True, logx=True,
        title=f"steps to perfect accuracy (cap {pd.cap})", xlabel="eta", ylabel=pd.second_axis))


def cmd_phase(cfg: dict, write: _Writer, jobs: int) -> dict:
    pd = analysis.phase_diagram(_phase_spec(cfg), jobs)
    _write_phase(write, "phase", pd)
    return {"max_steps": int(pd.steps.max()), "capped_cells": int(np.sum(pd.steps >= pd.cap))}


def cmd_closed_form(cfg: dict, write: _Writer, jobs: int) -> dict:
    """Binary orthogonal margins: closed form against adaptive gradient flow."""
    cf = cfg.get("closed_form", {})
    cs = np.atleast_1d(cf.get("c", [1.0])).astype(float)
    m0s = np.atleast_1d(cf.get("m0", [0.0] * len(cs))).astype(float)
    if m0s.size == 1:
        m0s = np.full(cs.size, m0s[0])
    if m0s.size != cs.size:
        from .config import ConfigError
        raise ConfigError("key 'closed_form.m0': must match the length of closed_form.c")
    t_end = float(cf.get("t_end", 1000.0))
    times = np.linspace(0.0, t_end, int(cf.get("points", 200)))
    lines = ["c,m0,t,closed,numerical,abs_error"]
    worst = 0.0
    for c, m0 in zip(cs, m0s):
        emb, task, W0 = binary_instance(c, m0)
        rec = gf_run(W0, emb, task, DynamicsConfig(kind="GF", t_end=t_end, record_times=tuple(times)))
        inst = closed_form.BinaryOrthogonalInstance(c, m0)
        for t, m in zip(rec.times, rec.margins[:, 0]):
            ref = closed_form.binary_margin_closed(inst, t)
            worst = max(worst, abs(ref - m))
            lines.append(",".join(format_float(v) for v in (c, m0, t, ref, m, abs(ref - m))))
    write("closed_form.csv", "\n".join(lines) + "\n")
    return {"sup_abs_error": worst}


def binary_instance(c: float, m0: float = 0.0):
    """Single-token binary orthogonal problem with constant ``c`` and initial margin ``m0``."""
    e = np.array([math.sqrt(c / 2.0), 0.0])
    emb = EmbeddingSet(e[None, :], np.eye(2), {"kind": "binary", "c": c})
    task = TaskSpec(np.array([0]), np.array([1.0]))
    du = emb.U[0] - emb.U[1]
    W0 = m0 * np.outer(du, e) / ((du @ du) * (e @ e))
    return emb, task, W0


COMMANDS: dict[str, Callable] = {
    "simulate": cmd_simulate,
    "landscape": cmd_landscape,
    "phase": cmd_phase,
    "closed-form": cmd_closed_form,
}


def _manifest(command: str, cfg: dict, result: RunResult, seconds: float) -> str:
    doc = {
        "version": version_string(),
        "command": command,
        "seed": cfg.get("seed", 0),
        "wall_clock_seconds": seconds,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg,
        "files": sorted(p.name for p in result.files),
        "summary": result.summary,
    }
    return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def run_experiment(cfg: dict, command: str = "simulate", out_dir=None, jobs: int = 1) -> RunResult:
    """Run a config-driven command, writing CSV/SVG outputs and ``manifest.json``."""
    cfg = parse_config(cfg)
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    out = Path(out_dir) if out_dir else Path(cfg.get("output") or default_output_dir() / cfg["experiment"])
    write = _Writer(out)
    start = time.perf_counter()
    summary = COMMANDS[command](cfg, write, jobs)
    result = RunResult(out, write.files, summary)
    atomic_write(out / "manifest.json", _manifest(command, cfg, result, time.perf_counter() - start))
    result.files.append(out / "manifest.json")
    return result


# --------------------------------------------------------------------------- registry


@dataclass(frozen=True)
class Experiment:
    id: str
    target: str
    scale: str
    run: Callable


P_PAIR = 0.75


def _fig1(write: _Writer, seed: int, jobs: int) -> dict:
    summary = {}
    for alpha in (-0.5, 0.95):
        emb, task = analysis.two_token_problem(alpha, P_PAIR)
        grid = analysis.landscape(emb, task, analysis.GridSpec(resolution=128))
        rec = gf_run(np.zeros((2, 2)), emb, task,
                     DynamicsConfig(kind="GF", t_end=1e4, record_times=tuple(np.logspace(-2, 4, 61)),
                                    gamma="canonical"))
        tag = f"alpha{alpha:+.2f}"
        _write_landscape(write, f"fig1_{tag}", grid, f"two tokens, alpha={alpha}",
                         overlays=[(rec.gamma[:, 0], rec.gamma[:, 1], svg.PALETTE[2])])
        summary[tag] = {"perfect_accuracy_cells": int(np.sum(grid.zero_one == 0)),
                        "flow_end_zero_one": float(rec.zero_one[-1])}
    return summary


def _gd_traces(emb, task, etas, steps, gamma="canonical", sharp=False):
    return {eta: gd_run(np.zeros((emb.d, emb.d)), emb, task,
                        DynamicsConfig(kind="GD", eta=eta, t_end=steps, gamma=gamma, sharpness=sharp))
            for eta in etas}


def _fig2(write: _Writer, seed: int, jobs: int) -> dict:
    emb, task = analysis.two_token_problem(0.95, P_PAIR)
    traces = _gd_traces(emb, task, (1.0, 10.0), 35)
    grid = analysis.landscape(emb, task, analysis.GridSpec(resolution=128))
    colors = {1.0: svg.PALETTE[0], 10.0: svg.PALETTE[1]}
    _write_landscape(write, "fig2", grid, "GD trajectories, eta=1 (red), eta=10 (green)",
                     overlays=[(r.gamma[:, 0], r.gamma[:, 1], colors[eta]) for eta, r in traces.items()])
    summary = {}
    for eta, rec in traces.items():
        write(f"fig2_eta{eta:g}.csv", rec.to_csv())
        early = rec.loss[(rec.times >= 1) & (rec.times <= 5)]
        summary[f"eta{eta:g}"] = {"max_loss_first_5_steps": float(early.max()),
                                  "spike": bool(early.max() > math.log(2))}
    write("fig2_loss.svg", svg.line_plot_svg(
        [(f"eta={eta:g}", r.times, r.loss) for eta, r in traces.items()],
        title="training loss", xlabel="step", ylabel="loss", hlines=(math.log(2),)))
    write("fig2_zero_one.svg", svg.line_plot_svg(
        [(f"eta={eta:g}", r.times, r.zero_one) for eta, r in traces.items()],
        title="0-1 loss", xlabel="step", ylabel="0-1 loss"))
    return summary


def _fig3(write: _Writer, seed: int, jobs: int) -> dict:
    emb, task = analysis.witness_instance()
    res = analysis.excess_risk(emb, task)
    grid = analysis.landscape(emb, task, analysis.GridSpec(resolution=128))
    sgd = sgd_run(np.zeros((2, 2)), emb, task,
                  DynamicsConfig(kind="SGD", eta=0.5, t_end=2000, batch_size=1, seed=seed, stream=(3,),
                                 record_every=5, gamma="canonical"))
    gd = gd_run(np.zeros((2, 2)), emb, task,
                DynamicsConfig(kind="GD", eta=0.5, t_end=2000, record_every=5, gamma="canonical"))
    _write_landscape(write, "fig3", grid, f"N=3 witness, excess risk {res.value:.3f}",
                     overlays=[(gd.gamma[:, 0], gd.gamma[:, 1], svg.PALETTE[0]),
                               (sgd.gamma[:, 0], sgd.gamma[:, 1], svg.PALETTE[1])])
    write("fig3_gd.csv", gd.to_csv())
    write("fig3_sgd.csv", sgd.to_csv())
    return {"excess_risk": res.value, "min_zero_one": res.min_zero_one,
            "zero_one_at_loss_minimizer": res.minimizer_zero_one, "separable": res.separable,
            "witness_seed": analysis.WITNESS_SEED, "witness_index": analysis.WITNESS_INDEX}


FIG4_ETAS = (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0)
FIG4_ALPHAS = (-0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 0.9, 0.95)
FIG4_LOG_RATIOS = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)


def fig4_diagrams(jobs: int = 1, cap: int = 10 ** 6):
    by_alpha = analysis.phase_diagram(
        analysis.PhaseSpec(FIG4_ETAS, "alpha", FIG4_ALPHAS, p1=P_PAIR, cap=cap), jobs)
    by_ratio = analysis.phase_diagram(
        analysis.PhaseSpec(FIG4_ETAS, "log_ratio", FIG4_LOG_RATIOS, alpha=0.5, cap=cap), jobs)
    return by_alpha, by_ratio


def _fig4(write: _Writer, seed: int, jobs: int) -> dict:
    by_alpha, by_ratio = fig4_diagrams(jobs)
    _write_phase(write, "fig4_eta_alpha", by_alpha)
    _write_phase(write, "fig4_eta_log_ratio", by_ratio)
    return {"eta_alpha_max": int(by_alpha.steps.max()), "eta_log_ratio_max": int(by_ratio.steps.max())}


def _fig5(write: _Writer, seed: int, jobs: int) -> dict:
    summary = {}
    cases = {"over": analysis.two_token_problem(0.95, P_PAIR), "under": analysis.witness_instance()}
    for name, (emb, task) in cases.items():
        steps = 35 if name == "over" else 200
        traces = _gd_traces(emb, task, (1.0, 10.0), steps, sharp=True)
        grid = analysis.landscape(emb, task, analysis.GridSpec(resolution=96, sharpness=True))
        colors = {1.0: svg.PALETTE[0], 10.0: svg.PALETTE[1]}
        _write_landscape(write, f"fig5_{name}", grid, f"{name}parameterized",
                         overlays=[(r.gamma[:, 0], r.gamma[:, 1], colors[eta]) for eta, r in traces.items()])
        for eta, rec in traces.items():
            write(f"fig5_{name}_eta{eta:g}.csv", rec.to_csv())
            summary[f"{name}_eta{eta:g}_final_sharpness"] = float(rec.sharpness[-1])
        write(f"fig5_{name}_trace.svg", svg.line_plot_svg(
            [(f"eta={eta:g}", r.times, r.sharpness) for eta, r in traces.items()],
            title=f"sharpness along GD ({name}parameterized)", xlabel="step", ylabel="sharpness"))
    return summary


FIG6_DIMS = (3, 5, 64)
FIG6_ETAS = (0.1, 1.0, 10.0)
FIG6_STEPS = 10 ** 4


def fig6_task(N: int = 5) -> TaskSpec:
    p = 1.0 / np.arange(1, N + 1)
    return TaskSpec(np.arange(N), p / p.sum())


def _fig6_job(args):
    seed, d, eta, steps = args
    emb = sphere_embeddings(5, 5, d, make_rng(seed, 6, d))
    rec = gd_run(np.zeros((d, d)), emb, fig6_task(), DynamicsConfig(kind="GD", eta=eta, t_end=steps))
    return (d, eta), rec


def fig6_replica(seed: int, jobs: int = 1, steps: int = FIG6_STEPS) -> dict:
    """Margin trajectories keyed by ``(d, eta)`` for one embedding seed."""
    args = [(seed, d, eta, steps) for d in FIG6_DIMS for eta in FIG6_ETAS]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_fig6_job, args))
    else:
        out = [_fig6_job(a) for a in args]
    return dict(out)


def first_positive(rec: TrajectoryRecord, x: int) -> Optional[float]:
    pos = np.nonzero(rec.margins[:, x] > 0)[0]
    return float(rec.times[pos[0]]) if pos.size else None


def fig6_checks(runs: dict) -> dict:
    """Qualitative margin claims for one replica.

    * ``capacity``: for d >= N every gap margin is positive at the horizon, for every eta;
    * ``forgetting``: for d = 3 some rare-token margin (tokens 4, 5) is negative at the horizon;
    * ``frequency_order``: token 1 turns positive no later than token 5, for every (d, eta).
    """
    capacity = all(np.all(r.margins[-1] > 0) for (d, _), r in runs.items() if d >= 5)
    forgetting = any(np.any(r.margins[-1, 3:] < 0) for (d, _), r in runs.items() if d == 3)
    order = True
    for r in runs.values():
        t1, t5 = first_positive(r, 0), first_positive(r, 4)
        if t5 is not None and (t1 is None or t1 > t5):
            order = False
    return {"capacity": capacity, "forgetting": forgetting, "frequency_order": order}


def _fig6(write: _Writer, seed: int, jobs: int) -> dict:
    runs = fig6_replica(seed, jobs)
    for (d, eta), rec in sorted(runs.items()):
        write(f"fig6_d{d}_eta{eta:g}.csv", rec.to_csv())
        t = np.maximum(rec.times, 1)
        write(f"fig6_d{d}_eta{eta:g}.svg", svg.line_plot_svg(
            [(f"x={i + 1}", t, rec.margins[:, i]) for i in range(5)],
            title=f"margins, d={d}, eta={eta:g}", xlabel="step", ylabel="margin", logx=True, hlines=(0.0,)))
    return fig6_checks(runs)


REGISTRY: dict[str, Experiment] = {
    "fig1": Experiment("fig1", "loss level lines and accuracy regions, two alpha-correlated tokens "
                       "(alpha in {-1/2, 0.95}, p = (3/4, 1/4))", "grid 128x128 instead of 512x512", _fig1),
    "fig2": Experiment("fig2", "GD trajectories and loss traces for eta = 1 and eta = 10 over 35 steps",
                       "landscape grid 128x128; same step count", _fig2),
    "fig3": Experiment("fig3", "underparameterized landscape (N = 3, d = M = 2), excess risk, SGD trajectory",
                       "seeded witness instance; 2000 SGD steps", _fig3),
    "fig4": Experiment("fig4", "steps to perfect accuracy over (eta, alpha) and (eta, log p1/p2)",
                       "9 x 8 and 9 x 9 cells, cap 1e6 steps", _fig4),
    "fig5": Experiment("fig5", "sharpness landscapes and sharpness along GD, over- and underparameterized",
                       "grid 96x96; 35 / 200 steps", _fig5),
    "fig6": Experiment("fig6", "margins for N = M = 5, p(x) ~ 1/x, d in {3, 5, 64}, eta in {0.1, 1, 10}",
                       "one seed per run, 1e4 steps", _fig6),
}


def reproduce(fig: str, out_dir=None, seed: int = 0, jobs: int = 1) -> RunResult:
    if fig not in REGISTRY:
        raise ValueError(f"unknown experiment {fig!r}; choose from {sorted(REGISTRY)}")
    exp = REGISTRY[fig]
    out = Path(out_dir) if out_dir else default_output_dir() / fig
    write = _Writer(out)
    start = time.perf_counter()
    summary = exp.run(write, seed, jobs)
    result = RunResult(out, write.files, summary)
    cfg = {"experiment": fig, "seed": seed}
    atomic_write(out / "manifest.json", _manifest(f"reproduce {fig}", cfg, result, time.perf_counter() - start))
    result.files.append(out / "manifest.json")
    return result
