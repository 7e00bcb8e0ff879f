"""Experiment configuration, orchestration and reporting.

A configuration is a small INI file::

    [experiment]
    kind = longtime            ; or highfreq
    [medium]
    spec = cos1d               ; builtin name or coefficient file
    cell_points = 1024
    [model]
    alpha = 4
    epsilon = 0.1
    [domain]
    bounds = -21,21            ; one "left,right" pair per axis, separated by ';'
    points_per_cell = 16
    [initial]
    beta = 4
    nu = 1
    [time]
    t_end = 1000
    output_times = log:1:1000:31
    [output]
    dir = run
"""

from __future__ import annotations

import configparser
import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cell import make_medium
from .effective import EffectiveModel, algorithm1, savings_count
from .errors import ConfigError, LongwaveError
from .wave import (MacroGrid, SimConfig, effective_solve, fine_solve,
                   gaussian_initial, relative_error, validate_domain, write_field)


@dataclass(frozen=True)
class ExperimentConfig:
    medium: str = "cos1d"
    cell_points: int | None = None
    alpha: int = 4
    epsilon: float = 0.1
    delta_margin: float = 0.0
    bounds: tuple[tuple[float, float], ...] = ((-21.0, 21.0),)
    points_per_cell: int = 16
    beta: float = 4.0
    nu: float = 1.0
    t_end: float = 1000.0
    dt: float | None = None
    output_times: tuple[float, ...] = ()
    output_dir: str = "run"
    kind: str = "longtime"
    dump_fields: bool = False

    @property
    def s(self) -> int:
        return self.alpha // 2

    def grid(self) -> MacroGrid:
        return MacroGrid.with_cell_resolution(self.bounds, self.epsilon, self.points_per_cell)

    def times(self) -> tuple[float, ...]:
        return self.output_times or default_output_times(self.t_end, self.epsilon)

    def check(self) -> "ExperimentConfig":
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.kind not in ("longtime", "highfreq"):
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if not self.medium.startswith("builtin:") and ":" not in self.medium \
                and self.medium not in ("cos1d", "laminate2d") and not os.path.exists(self.medium):
            raise ConfigError(f"medium file {self.medium!r} does not exist")
        validate_domain(self.grid())
        return self


def default_output_times(t_end: float, epsilon: float, count: int = 31) -> tuple[float, ...]:
    """Logarithmically spaced times in [1, t_end], plus eps^-2 when it lies inside."""
    t0 = min(1.0, t_end)
    ts = set(np.round(np.geomspace(t0, t_end, count), 12).tolist())
    if epsilon ** -2 < t_end:
        ts.add(float(epsilon ** -2))
    return tuple(sorted(ts))


def _parse_times(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        if text.startswith("log:"):
            _, lo, hi, n = text.split(":")
            lo, hi, n = float(lo), float(hi), int(n)
            if lo <= 0 or hi < lo or n < 1:
                raise ValueError
            return tuple(np.geomspace(lo, hi, n).tolist())
        return tuple(float(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad times {text!r}; use a list or log:<first>:<last>:<count>") from None


def _parse_bounds(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for part in text.split(";"):
        lr = [p for p in part.replace(" ", "").split(",") if p]
        try:
            if len(lr) != 2:
                raise ValueError
            out.append((float(lr[0]), float(lr[1])))
        except ValueError:
            raise ConfigError(f"bad bounds {text!r}; use 'left,right' per axis separated by ';'") from None
    return tuple(out)


def load_config(path, paper_scale: bool = False) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not parser.read(path):
        raise ConfigError(f"cannot read config {path}")
    get = lambda sec, key, fb=None: parser.get(sec, key, fallback=fb)  # noqa: E731
    try:
        dt = get("time", "dt")
        cp = get("medium", "cell_points")
        medium = get("medium", "spec", "cos1d")
        base = Path(path).parent
        if not medium.startswith("builtin:") and ":" not in medium and medium not in ("cos1d", "laminate2d"):
            medium = str((base / medium).resolve()) if not os.path.isabs(medium) else medium
        out_dir = get("output", "dir", "run")
        if not os.path.isabs(out_dir):
            out_dir = str((base / out_dir).resolve())
        cfg = ExperimentConfig(
            medium=medium,
            cell_points=int(cp) if cp else None,
            alpha=parser.getint("model", "alpha", fallback=4),
            epsilon=parser.getfloat("model", "epsilon", fallback=0.1),
            delta_margin=parser.getfloat("model", "delta_margin", fallback=0.0),
            bounds=_parse_bounds(get("domain", "bounds", "-21,21")),
            points_per_cell=parser.getint("domain", "points_per_cell", fallback=16),
            beta=parser.getfloat("initial", "beta", fallback=4.0),
            nu=parser.getfloat("initial", "nu", fallback=1.0),
            t_end=parser.getfloat("time", "t_end", fallback=1000.0),
            dt=float(dt) if dt else None,
            output_times=_parse_times(get("time", "output_times", "")),
            output_dir=out_dir,
            kind=get("experiment", "kind", "longtime"),
            dump_fields=parser.getboolean("output", "fields", fallback=False),
        )
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    if paper_scale:
        cfg = paper_scale_preset(cfg)
    return cfg.check()


def paper_scale_preset(cfg: ExperimentConfig) -> ExperimentConfig:
    """Domain (-84, 84), final time 1e4, 16 points per cell and dt = h/16."""
    h = cfg.epsilon / 16
    return replace(cfg, bounds=((-84.0, 84.0),) * len(cfg.bounds), t_end=1e4, points_per_cell=16,
                   dt=h / 16, output_times=())


# running ---------------------------------------------------------------------

class _Manifest:
    """Run manifest, rewritten after every stage so that partial runs are visible."""

    def __init__(self, cfg: ExperimentConfig):
        self.path = Path(cfg.output_dir) / "manifest.json"
        self.data = {"config": _jsonable(asdict(cfg)), "stages": {}, "complete": False, "outputs": {}}
        self.t0 = time.perf_counter()

    def stage(self, name: str, **info):
        self.data["stages"][name] = {"status": "done", **info}
        self.write()

    def fail(self, name: str, err: Exception):
        self.data["stages"][name] = {"status": "failed", "error": f"{type(err).__name__}: {err}"}
        self.write()

    def finish(self):
        self.data["complete"] = True
        self.write()

    def write(self):
        self.data["wall_clock_s"] = round(time.perf_counter() - self.t0, 3)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class ExperimentResult:
    times: list[float]
    errors: dict[int, list[float]]       # s -> err(u~^s)(t)
    models: list[EffectiveModel]
    manifest: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def build_models(cfg: ExperimentConfig, manifest: _Manifest | None = None) -> list[EffectiveModel]:
    """Models of orders 0..s from a single run of the tensor pipeline."""
    a = make_medium(cfg.medium, cfg.cell_points)
    t = time.perf_counter()
    full = algorithm1(a, cfg.alpha, cfg.epsilon, delta_margin=cfg.delta_margin)
    models = [full.truncate(j) for j in range(cfg.s + 1)]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in models:
        p = out / f"model_s{m.s}.txt"
        m.save(p)
        paths.append(p.name)
    if manifest is not None:
        manifest.data["outputs"]["models"] = paths
        manifest.stage("tensors", seconds=round(time.perf_counter() - t, 3), dim=a.dim,
                       cell_solves=int(full.info.get("cell_solves", 0)), s=cfg.s,
                       deltastar=[st.deltastar for st in full.stages])
    return models


def _with_manifest(fn):
    def run(cfg: ExperimentConfig) -> ExperimentResult:
        man = _Manifest(cfg)
        man.write()
        try:
            return fn(cfg, man)
        except LongwaveError as e:
            current = man.data.get("current", "unknown")
            man.fail(current, e)
            raise
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


@_with_manifest
def run_experiment(cfg: ExperimentConfig, man: _Manifest) -> ExperimentResult:
    """Long-time comparison of the fine solution with the effective solutions of orders 0..s.

    Writes ``curves.csv`` (columns t, err_s0, ..., err_sS), one model file per
    order and ``manifest.json`` into ``cfg.output_dir``.
    """
    out = Path(cfg.output_dir)
    man.data["current"] = "tensors"
    models = build_models(cfg, man)
    a = make_medium(cfg.medium, cfg.cell_points)

    man.data["current"] = "fine"
    grid = cfg.grid()
    g0 = gaussian_initial(grid, cfg.beta, cfg.nu)
    g1 = np.zeros_like(g0)
    t = time.perf_counter()
    run = fine_solve(grid, a, g0, g1, SimConfig(cfg.t_end, cfg.dt, cfg.times()))
    man.stage("fine", seconds=round(time.perf_counter() - t, 3), steps=run.steps, dt=run.dt,
              energy_drift=run.energy_drift, grid=list(grid.shape))

    man.data["current"] = "effective"
    times = [st.t for st in run.states]
    errors = {}
    for m in models:
        eff = effective_solve(grid, m, g0, g1, times)
        errors[m.s] = [relative_error(f.u, e.u) for f, e in zip(run.states, eff)]
        if cfg.dump_fields:
            write_field(out / f"effective_s{m.s}_final.bin", grid, eff[-1].t, eff[-1].u)
    if cfg.dump_fields:
        write_field(out / "fine_final.bin", grid, run.states[-1].t, run.states[-1].u)
    man.stage("effective", orders=[m.s for m in models])

    man.data["current"] = "curves"
    curves = out / "curves.csv"
    write_curves(curves, times, errors)
    man.data["outputs"]["curves"] = curves.name
    man.data["final_errors"] = {f"err_s{s}": errs[-1] for s, errs in errors.items()}
    man.stage("curves", rows=len(times))
    man.data.pop("current", None)
    man.finish()
    return ExperimentResult(times, errors, models, man.data)


def write_curves(path, times, errors: dict[int, list[float]]) -> None:
    orders = sorted(errors)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *(f"err_s{s}" for s in orders)])
        for i, t in enumerate(times):
            w.writerow([f"{t:.17g}", *(f"{errors[s][i]:.17g}" for s in orders)])


def read_curves(path) -> tuple[list[float], dict[int, list[float]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    if not head or head[0] != "t":
        raise ConfigError(f"{path} is not an error-curve file")
    orders = [int(h[len("err_s"):]) for h in head[1:]]
    times = [float(r[0]) for r in rows[1:]]
    errors = {s: [float(r[j + 1]) for r in rows[1:]] for j, s in enumerate(orders)}
    return times, errors


@_with_manifest
def run_highfreq_2d(cfg: ExperimentConfig, man: _Manifest) -> ExperimentResult:
    """Fine and effective solutions for the initial value g(nu x) at t_end.

    Writes the cut along x1 = 0 (``cut.csv``: x2, fine, eff_s0..eff_sS) and
    full field dumps of every solution.
    """
    out = Path(cfg.output_dir)
    man.data["current"] = "tensors"
    models = build_models(cfg, man)
    a = make_medium(cfg.medium, cfg.cell_points)
    grid = cfg.grid()
    if grid.dim != 2:
        raise ConfigError("the high-frequency experiment needs a two-dimensional medium")

    man.data["current"] = "fine"
    g0 = gaussian_initial(grid, cfg.beta, cfg.nu)
    g1 = np.zeros_like(g0)
    t = time.perf_counter()
    run = fine_solve(grid, a, g0, g1, SimConfig(cfg.t_end, cfg.dt, (cfg.t_end,)))
    fine = run.states[-1]
    man.stage("fine", seconds=round(time.perf_counter() - t, 3), steps=run.steps, dt=run.dt,
              energy_drift=run.energy_drift, grid=list(grid.shape))

    man.data["current"] = "effective"
    effs = {m.s: effective_solve(grid, m, g0, g1, [fine.t])[0] for m in models}
    write_field(out / "fine.bin", grid, fine.t, fine.u)
    for s, e in effs.items():
        write_field(out / f"effective_s{s}.bin", grid, e.t, e.u)
    man.stage("effective", orders=sorted(effs))

    man.data["current"] = "curves"
    (l1, r1), (l2, _) = grid.bounds
    i0 = int(round((0.0 - l1) / grid.spacing[0]))
    if abs(l1 + i0 * grid.spacing[0]) > 1e-9 * grid.spacing[0] * grid.shape[0]:
        raise ConfigError("x1 = 0 is not a grid line; use bounds symmetric about 0")
    x2 = l2 + grid.spacing[1] * np.arange(grid.shape[1])
    cut = {s: e.u[i0] for s, e in effs.items()}
    with open(out / "cut.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x2", "fine", *(f"eff_s{s}" for s in sorted(cut))])
        for j in range(grid.shape[1]):
            w.writerow([f"{x2[j]:.17g}", f"{fine.u[i0, j]:.17g}", *(f"{cut[s][j]:.17g}" for s in sorted(cut))])
    rms = {s: float(np.sqrt(np.mean((c - fine.u[i0]) ** 2))) for s, c in cut.items()}
    errors = {s: [relative_error(fine.u, e.u)] for s, e in effs.items()}
    man.data["outputs"]["cut"] = "cut.csv"
    man.data["cut_rms"] = {f"eff_s{s}": v for s, v in rms.items()}
    man.data["final_errors"] = {f"err_s{s}": v[0] for s, v in errors.items()}
    man.stage("curves", rows=grid.shape[1])
    man.data.pop("current", None)
    man.finish()
    return ExperimentResult([fine.t], errors, models, man.data, {"cut_rms": rms, "fine": fine, "effective": effs})


def run(cfg: ExperimentConfig) -> ExperimentResult:
    return run_highfreq_2d(cfg) if cfg.kind == "highfreq" else run_experiment(cfg)


# reporting -------------------------------------------------------------------

def report(manifest_path) -> str:
    """Human-readable summary of a run directory's manifest."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        with open(manifest_path) as fh:
            man = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read manifest {manifest_path}: {e}") from None
    base = manifest_path.parent
    lines = []
    cfg = man.get("config", {})
    lines.append(f"medium {cfg.get('medium')}  alpha {cfg.get('alpha')}  epsilon {cfg.get('epsilon')}")

    models = []
    for name in man.get("outputs", {}).get("models", []):
        p = base / name
        if p.exists():
            models.append(EffectiveModel.load(p))
    if models:
        full = max(models, key=lambda m: m.s)
        lines.append("a0 = " + " ".join(f"{v:.10g}" for v in full.a0.values))
        if full.s == 0:
            lines.append("homogenized only")
        for st in full.stages:
            lines.append(f"stage {st.r}: deltastar = {st.deltastar:.6e}")
            for name, t in st.tensors().items():
                lines.append(f"  {name} = " + " ".join(f"{v:.6e}" for v in t.values))
        if full.s >= 1:
            sv = savings_count(full.dim, full.s)
            lines.append(f"cell problems: {sv['solved']} solved / {sv['naive']} naive / {sv['spared']} spared")
            solved = int(full.info.get("cell_solves", sv["solved"]))
            if solved != sv["solved"]:
                lines.append(f"  (pipeline reported {solved} solves)")

    missing = []
    stages = man.get("stages", {})
    for name in ("tensors", "fine", "effective", "curves"):
        st = stages.get(name)
        if st is None or st.get("status") != "done":
            missing.append(name if st is None else f"{name} ({st.get('error', st.get('status'))})")
    curves = man.get("outputs", {}).get("curves")
    if curves and (base / curves).exists():
        times, errors = read_curves(base / curves)
        lines.append("t " + " ".join(f"err_s{s}" for s in sorted(errors)))
        for i, t in enumerate(times):
            lines.append(f"{t:.6g} " + " ".join(f"{errors[s][i]:.3e}" for s in sorted(errors)))
    elif "cut_rms" in man:
        lines.append("cut rms: " + " ".join(f"{k} {v:.3e}" for k, v in sorted(man["cut_rms"].items())))
    elif "curves" not in missing:
        missing.append("curves (file missing)")
    if not man.get("complete") or missing:
        lines.append("incomplete: " + ", ".join(missing or ["run did not finish"]))
    lines.append(f"wall clock {man.get('wall_clock_s', float('nan')):.1f} s")
    return "\n".join(lines)
