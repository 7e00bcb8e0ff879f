"""Fine-scale and effective wave propagation on a periodic macroscopic box.

The fine solution solves ``u_tt = div(a(x/eps) grad u)`` with a Fourier
pseudo-spectral operator and the leapfrog scheme.  Effective solutions are
propagated exactly in time, one Fourier mode at a time, from the dispersion
relation of an :class:`~longwave.effective.EffectiveModel`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .cell import CoefficientField
from .effective import EffectiveModel
from .errors import (BlowUp, CFLViolation, ConfigError, IncompatibleDomain,
                     ModelInvariantViolation, NumericalError)
from .spectral import PeriodicBox

#: cells per axis must be integers to this relative accuracy
INTEGRALITY_TOL = 1e-12
#: default fraction of the stability limit used by the CFL check
CFL_SAFETY = 0.5
#: allowed relative drift of the discrete leapfrog energy
ENERGY_TOL = 1e-6
#: ||u|| may not exceed this multiple of its a priori bound
BLOWUP_FACTOR = 1e6


@dataclass(frozen=True)
class DomainCheck:
    axis: int        # 1-based
    cells: float     # (right - left) / (l eps)
    points: int
    ok: bool
    message: str


@dataclass(frozen=True)
class MacroGrid:
    """Uniform periodic grid on ``prod_i (left_i, right_i)`` for the scale ``epsilon``."""

    bounds: tuple[tuple[float, float], ...]
    shape: tuple[int, ...]
    epsilon: float
    cell_lengths: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple((float(l), float(r)) for l, r in self.bounds))
        object.__setattr__(self, "shape", tuple(int(m) for m in self.shape))
        cl = self.cell_lengths or (1.0,) * len(self.shape)
        object.__setattr__(self, "cell_lengths", tuple(float(x) for x in cl))
        if not (len(self.bounds) == len(self.shape) == len(self.cell_lengths)):
            raise ConfigError("bounds, grid shape and cell lengths must have the same dimension")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    @classmethod
    def with_cell_resolution(cls, bounds, epsilon: float, points_per_cell, cell_lengths=None) -> "MacroGrid":
        """Grid with ``points_per_cell`` nodes in every eps-cell (h = eps l / points_per_cell)."""
        d = len(bounds)
        ppc = (points_per_cell,) * d if np.ndim(points_per_cell) == 0 else tuple(points_per_cell)
        cl = cell_lengths or (1.0,) * d
        shape = [round((r - l) / (L * epsilon)) * p for (l, r), L, p in zip(bounds, cl, ppc)]
        return cls(tuple(bounds), tuple(shape), epsilon, tuple(cl))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def lengths(self) -> tuple[float, ...]:
        return tuple(r - l for l, r in self.bounds)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / m for L, m in zip(self.lengths, self.shape))

    @property
    def origin(self) -> tuple[float, ...]:
        return tuple(l for l, _ in self.bounds)

    @property
    def box(self) -> PeriodicBox:
        return PeriodicBox(self.lengths, self.shape)

    def nodes(self) -> tuple[np.ndarray, ...]:
        return self.box.nodes(self.origin)

    def scaled(self, nu: float) -> "MacroGrid":
        """The grid of the variables (nu x) for cell size nu eps."""
        return MacroGrid(tuple((nu * l, nu * r) for l, r in self.bounds), self.shape,
                         nu * self.epsilon, self.cell_lengths)


def validate_domain(grid: MacroGrid) -> list[DomainCheck]:
    """Check that the box holds whole eps-cells and the grid resolves them exactly.

    Raises IncompatibleDomain naming the first offending axis.
    """
    checks = []
    for i, ((l, r), m, L) in enumerate(zip(grid.bounds, grid.shape, grid.cell_lengths), start=1):
        n = (r - l) / (L * grid.epsilon)
        k = round(n)
        if r <= l:
            checks.append(DomainCheck(i, n, m, False, f"empty interval ({l}, {r})"))
        elif k < 1 or abs(n - k) > INTEGRALITY_TOL * max(1.0, abs(n)):
            checks.append(DomainCheck(i, n, m, False, f"{n:.12g} cells of size {L * grid.epsilon:g} is not an integer"))
        elif m < 2 or m % 2:
            checks.append(DomainCheck(i, n, m, False, f"{m} points is not a positive even number"))
        elif m % k:
            checks.append(DomainCheck(i, n, m, False, f"{m} points do not divide evenly into {k} cells"))
        else:
            checks.append(DomainCheck(i, n, m, True, f"{k} cells, {m // k} points per cell"))
    for c in checks:
        if not c.ok:
            raise IncompatibleDomain(c.axis, c.message)
    return checks


class FineOperator:
    """``u -> div(a(x/eps) grad u)`` on a macro grid, applied pseudo-spectrally."""

    def __init__(self, grid: MacroGrid, a: CoefficientField):
        if a.dim != grid.dim:
            raise ConfigError(f"medium is {a.dim}-dimensional, domain is {grid.dim}-dimensional")
        if tuple(a.geometry.lengths) != grid.cell_lengths:
            raise ConfigError("medium cell does not match the cell lengths of the grid")
        validate_domain(grid)
        self.grid = grid
        self.box = grid.box
        y = tuple(x / grid.epsilon for x in grid.nodes())
        self.coef = np.ascontiguousarray(a.sample(y))
        d = grid.dim
        self._ik = [1j * k for k in self.box.wavenumbers]
        # pairs (t, m) with a nonzero coefficient entry
        self._pairs = [(t, m) for t in range(d) for m in range(d) if np.any(self.coef[t, m])]
        eig = np.linalg.eigvalsh(np.moveaxis(self.coef, (0, 1), (-2, -1)))
        self.lam, self.Lam = float(eig.min()), float(eig.max())

    def __call__(self, u: np.ndarray) -> np.ndarray:
        box = self.box
        uh = box.fft(u)
        g = [box.ifft(ik * uh) for ik in self._ik]
        acc = 0
        for t, ik in enumerate(self._ik):
            f = 0
            for tt, m in self._pairs:
                if tt == t:
                    f = f + self.coef[t, m] * g[m]
            if np.ndim(f):
                acc = acc + ik * box.fft(f)
        return box.ifft(acc) if np.ndim(acc) else np.zeros_like(u)


def apply_fine_operator(grid: MacroGrid, a: CoefficientField, u: np.ndarray) -> np.ndarray:
    return FineOperator(grid, a)(u)


def stability_limit(grid: MacroGrid, Lam: float, safety: float = CFL_SAFETY) -> float:
    """Largest admissible leapfrog step: safety * h_min / sqrt(d Lam)."""
    return safety * min(grid.spacing) / math.sqrt(grid.dim * Lam)


def default_dt(grid: MacroGrid, Lam: float) -> float:
    return min(grid.spacing) / (4 * math.sqrt(Lam))


@dataclass(frozen=True)
class SimConfig:
    t_end: float
    dt: float | None = None          # None: default_dt
    output_times: tuple[float, ...] = ()
    cfl_safety: float = CFL_SAFETY
    energy_tol: float = ENERGY_TOL

    def __post_init__(self):
        if self.t_end <= 0:
            raise ConfigError("t_end must be positive")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError("dt must be positive")
        times = tuple(float(t) for t in self.output_times) or (float(self.t_end),)
        if min(times) < 0 or max(times) > self.t_end * (1 + 1e-12):
            raise ConfigError("output times must lie in [0, t_end]")
        object.__setattr__(self, "output_times", times)


@dataclass(frozen=True)
class WaveState:
    t: float
    u: np.ndarray
    v: np.ndarray


@dataclass
class FineRun:
    states: list[WaveState]
    dt: float
    steps: int
    energy_drift: float
    energy: float
    info: dict = field(default_factory=dict)


def step_plan(cfg: SimConfig, dt_max: float) -> tuple[float, int, list[int]]:
    """Uniform step dividing t_end, and the step index of every output time."""
    steps = max(1, math.ceil(cfg.t_end / dt_max * (1 - 1e-12)))
    dt = cfg.t_end / steps
    return dt, steps, [int(round(t / dt)) for t in cfg.output_times]


def fine_solve(grid: MacroGrid, a: CoefficientField, g0: np.ndarray, g1: np.ndarray,
               cfg: SimConfig, operator: FineOperator | None = None) -> FineRun:
    """Leapfrog integration of ``u_tt = div(a(x/eps) grad u)``.

    Output times are snapped to the nearest step of the uniform time grid;
    the returned states carry the actual times.  Velocities are central
    differences of neighbouring steps.
    """
    L = operator or FineOperator(grid, a)
    if g0.shape != grid.shape or g1.shape != grid.shape:
        raise ConfigError("initial data do not match the grid")
    limit = stability_limit(grid, L.Lam, cfg.cfl_safety)
    dt_req = cfg.dt if cfg.dt is not None else default_dt(grid, L.Lam)
    if dt_req > limit:
        raise CFLViolation(f"dt = {dt_req:.4g} exceeds the stability limit {limit:.4g}")
    dt, steps, out_steps = step_plan(cfg, dt_req)
    wanted = set(out_steps)
    inner = lambda p, q: float(np.sum(p * q))  # noqa: E731  (grid weights cancel in ratios)

    bound = max(np.linalg.norm(g0) + cfg.t_end * np.linalg.norm(g1), np.finfo(float).tiny)
    dt2 = dt * dt
    u_prev = np.array(g0, dtype=float)
    Lu = L(u_prev)
    u = u_prev + dt * g1 + 0.5 * dt2 * Lu
    energy0 = 0.5 * inner(u - u_prev, u - u_prev) / dt2 - 0.5 * inner(u, Lu)
    scale = abs(energy0) if energy0 != 0 else 1.0
    drift = 0.0
    states = []
    if 0 in wanted:
        states.append(WaveState(0.0, u_prev.copy(), np.array(g1, dtype=float)))
    # invariant: u = u^n, u_prev = u^{n-1}
    for n in range(1, steps + 1):
        Lu = L(u)
        u_next = 2 * u - u_prev + dt2 * Lu
        e = 0.5 * inner(u_next - u, u_next - u) / dt2 - 0.5 * inner(u_next, Lu)
        drift = max(drift, abs(e - energy0) / scale)
        if n in wanted:
            states.append(WaveState(n * dt, u.copy(), (u_next - u_prev) / (2 * dt)))
        if n % 64 == 0 or n == steps:
            nrm = np.linalg.norm(u_next)
            if not np.isfinite(nrm) or nrm > BLOWUP_FACTOR * bound:
                raise BlowUp(f"solution norm {nrm:.3e} at t = {(n + 1) * dt:.4g} "
                             f"exceeds {BLOWUP_FACTOR:g} times its bound {bound:.3e}")
        u_prev, u = u, u_next
    if drift > cfg.energy_tol:
        raise NumericalError(f"leapfrog energy drifted by {drift:.3e} (relative)")
    return FineRun(states, dt, steps, drift, energy0, {"Lam": L.Lam, "dt_limit": limit})


# effective propagation -------------------------------------------------------

def dispersion_relation(model: EffectiveModel, k) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(H, A, omega)`` for wave vectors ``k`` (last axis of length d)."""
    k = np.asarray(k, dtype=float)
    eps2 = model.epsilon ** 2
    H = np.ones(k.shape[:-1])
    A = np.asarray(T.contract_kpow(model.a0, k), dtype=float) + 0.0 * H
    for st in model.stages:
        H = H + eps2 ** st.r * T.contract_kpow(st.b2r, k)
        A = A + eps2 ** st.r * T.contract_kpow(st.a2r, k)
    tol = 1e-12 * (1.0 + np.abs(A))
    if np.any(A < -tol) or np.any(H < 1 - 1e-12):
        raise ModelInvariantViolation("dispersion relation has A < 0 or H < 1; the model tensors are not admissible")
    A = np.maximum(A, 0.0)
    return H, A, np.sqrt(A / H)


def _mode_wavevectors(grid: MacroGrid) -> np.ndarray:
    return np.stack(grid.box.wavenumbers, axis=-1)


def effective_solve(grid: MacroGrid, model: EffectiveModel, g0: np.ndarray, g1: np.ndarray,
                    times: Sequence[float]) -> list[WaveState]:
    """Exact-in-time propagation of every Fourier mode of the effective equation."""
    if model.dim != grid.dim:
        raise ConfigError(f"model is {model.dim}-dimensional, grid is {grid.dim}-dimensional")
    box = grid.box
    _, _, omega = dispersion_relation(model, _mode_wavevectors(grid))
    h0, h1 = box.fft(g0), box.fft(g1)
    out = []
    for t in times:
        c = np.cos(omega * t)
        wt = omega * t
        # sin(wt)/w with its limit t at w = 0
        sinc = np.where(omega > 0, np.sin(wt) / np.where(omega > 0, omega, 1.0), t)
        uh = c * h0 + sinc * h1
        vh = -omega * np.sin(wt) * h0 + c * h1
        out.append(WaveState(float(t), box.ifft(uh), box.ifft(vh)))
    return out


def mode_energy(grid: MacroGrid, model: EffectiveModel, state: WaveState) -> np.ndarray:
    """Per-mode energy H |v_k|^2 + A |u_k|^2 (conserved by the effective flow)."""
    H, A, _ = dispersion_relation(model, _mode_wavevectors(grid))
    box = grid.box
    return H * np.abs(box.fft(state.v)) ** 2 + A * np.abs(box.fft(state.u)) ** 2


def relative_error(u: np.ndarray, u_eff: np.ndarray) -> float:
    """||u - u_eff|| / ||u|| in the discrete L2 norm of a uniform grid."""
    nu = float(np.linalg.norm(u))
    if nu == 0:
        raise NumericalError("reference field vanishes; relative error undefined")
    return float(np.linalg.norm(u - u_eff)) / nu


def gaussian_initial(grid: MacroGrid, beta: float, nu: float = 1.0) -> np.ndarray:
    """exp(-beta |nu (x - c)|^2) with c the centre of the box."""
    if beta <= 0 or nu <= 0:
        raise ConfigError("beta and nu must be positive")
    r2 = 0.0
    for x, (l, r) in zip(grid.nodes(), grid.bounds):
        r2 = r2 + (nu * (x - 0.5 * (l + r))) ** 2
    return np.exp(-beta * r2)


# field dumps -----------------------------------------------------------------

def write_field(path, grid: MacroGrid, t: float, u: np.ndarray) -> None:
    bounds = ";".join(f"{l:.17g},{r:.17g}" for l, r in grid.bounds)
    head = f"field d={grid.dim} bounds={bounds} m={','.join(map(str, grid.shape))} t={t:.17g}\n"
    with open(path, "wb") as fh:
        fh.write(head.encode())
        fh.write(np.ascontiguousarray(u, dtype="<f8").tobytes())


def read_field(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        head = fh.readline().decode().split()
        if not head or head[0] != "field":
            raise ConfigError(f"{path} is not a field dump")
        meta = dict(f.split("=", 1) for f in head[1:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    shape = tuple(int(m) for m in meta["m"].split(","))
    if data.size != np.prod(shape):
        raise ConfigError(f"{path}: field has {data.size} values, expected {np.prod(shape)}")
    info = {"d": int(meta["d"]), "t": float(meta["t"]), "shape": shape,
            "bounds": tuple(tuple(float(x) for x in b.split(",")) for b in meta["bounds"].split(";"))}
    return info, data.reshape(shape).copy()
