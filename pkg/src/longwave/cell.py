"""Cell problems on the reference cell Y with periodic boundary conditions.

The correctors chi^1, chi^2, ... solve

    <a grad chi, grad w>_Y = <f1, grad w>_Y + <f0, w>_Y   for all periodic w,

i.e. ``-div(a grad chi) = -div f1 + f0`` with zero mean.  The operator is
applied pseudo-spectrally and inverted with preconditioned conjugate
gradients on the zero-mean subspace.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, IterationLimit, NumericalError, SolvabilityViolated
from .spectral import PeriodicBox, flux
from .tensor import SymTensor, n_distinct, sym_outer, symmetrize_blocks

#: relative residual of the linear solves
SOLVE_TOL = 1e-12
#: allowed mean of f0, relative to the size of the terms it is assembled from
SOLVABILITY_TOL = 1e-8


@dataclass(frozen=True)
class CellGeometry:
    lengths: tuple[float, ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(float(x) for x in self.lengths))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        # PeriodicBox validates positivity and even point counts
        PeriodicBox(self.lengths, self.shape)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    @cached_property
    def box(self) -> PeriodicBox:
        return PeriodicBox(self.lengths, self.shape)

    def nodes(self) -> tuple[np.ndarray, ...]:
        return self.box.nodes()


class CoefficientField:
    """Symmetric, uniformly elliptic, Y-periodic matrix field a(y) on the cell grid.

    ``func``, when given, evaluates a(y) analytically at arbitrary points
    (arrays of coordinates) and returns an array of shape (d, d, *y.shape);
    it is used to sample a(x/eps) on macroscopic grids.
    """

    def __init__(self, geometry: CellGeometry, values, func: Callable | None = None,
                 name: str = "custom"):
        values = np.array(values, dtype=float)  # own copy, frozen below
        d = geometry.dim
        if values.shape != (d, d) + geometry.shape:
            raise ConfigError(f"coefficient array has shape {values.shape}, expected {(d, d) + geometry.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigError("coefficient has non-finite entries")
        if not np.array_equal(values, np.swapaxes(values, 0, 1)):
            raise ConfigError("coefficient is not symmetric")
        eig = np.linalg.eigvalsh(np.moveaxis(values, (0, 1), (-2, -1)))
        self.lam = float(eig.min())
        self.Lam = float(eig.max())
        if self.lam <= 0:
            raise ConfigError(f"coefficient is not uniformly elliptic (min eigenvalue {self.lam:g})")
        values.setflags(write=False)
        self.geometry = geometry
        self.values = values
        self.func = func
        self.name = name

    @property
    def dim(self) -> int:
        return self.geometry.dim

    @cached_property
    def sym(self) -> np.ndarray:
        """Distinct entries a_ij, i <= j, stacked as an order-2 field tensor."""
        return np.stack([self.values[i - 1, j - 1] for i, j in T.multi_index_set(self.dim, 2)])

    def mean_matrix(self) -> np.ndarray:
        return self.geometry.box.mean(self.values)

    def sample(self, y: Sequence[np.ndarray]) -> np.ndarray:
        """a at arbitrary points ``y`` (one coordinate array per axis)."""
        if self.func is not None:
            return np.asarray(self.func(*y), dtype=float)
        # grid-sampled medium: the points must be cell nodes (mod Y)
        idx = []
        for yi, L, n in zip(y, self.geometry.lengths, self.geometry.shape):
            s = np.mod(yi, L) / (L / n)
            j = np.rint(s)
            if np.max(np.abs(s - j), initial=0.0) > 1e-6:
                raise ConfigError("grid-sampled medium requested off its nodes; refine the cell grid")
            idx.append(j.astype(np.intp) % n)
        return self.values[(slice(None), slice(None), *idx)]

    def with_shape(self, shape) -> "CoefficientField":
        """Same medium on another cell grid (analytic media only)."""
        if self.func is None:
            raise ConfigError("only analytic media can be resampled")
        geom = CellGeometry(self.geometry.lengths, shape)
        return CoefficientField(geom, self.func(*geom.nodes()), self.func, self.name)


# media -----------------------------------------------------------------------

def _cos1d(y):
    return (np.sqrt(2.0) - np.cos(2 * np.pi * y))[None, None]


def _laminate2d(y1, y2):
    s = 1.0 - 0.5 * np.cos(2 * np.pi * y2) + 0.0 * y1
    z = np.zeros_like(s)
    return np.array([[s, z], [z, s]])


def _constant(c: float, d: int):
    def func(*y):
        return c * np.eye(d).reshape((d, d) + (1,) * len(y)) * np.ones(np.shape(y[0]))
    return func


def builtin_medium(name: str, points) -> CoefficientField:
    """``cos1d``, ``laminate2d`` or ``constant:<c>[:<d>]`` sampled at ``points`` per axis."""
    if name.startswith("builtin:"):
        name = name[len("builtin:"):]
    if name == "cos1d":
        func, d = _cos1d, 1
    elif name == "laminate2d":
        func, d = _laminate2d, 2
    elif name.startswith("constant:"):
        parts = name.split(":")
        try:
            c = float(parts[1])
            d = int(parts[2]) if len(parts) > 2 else 1
        except (IndexError, ValueError):
            raise ConfigError(f"bad constant medium {name!r}; use constant:<c>[:<d>]") from None
        func = _constant(c, d)
    else:
        raise ConfigError(f"unknown builtin medium {name!r}")
    shape = tuple(points) if np.ndim(points) else (int(points),) * d
    if len(shape) != d:
        raise ConfigError(f"medium {name!r} is {d}-dimensional, got grid {shape}")
    geom = CellGeometry((1.0,) * d, shape)
    return CoefficientField(geom, func(*geom.nodes()), func, name)


def make_medium(spec: str, points=None) -> CoefficientField:
    """Builtin medium (``builtin:name`` or bare name) or a coefficient file."""
    bare = spec[len("builtin:"):] if spec.startswith("builtin:") else spec
    if spec.startswith("builtin:") or bare in ("cos1d", "laminate2d") or bare.startswith("constant:"):
        if points is None:
            points = 1024 if bare in ("cos1d",) or bare.startswith("constant:") else 256
        return builtin_medium(bare, points)
    if not os.path.exists(spec):
        raise ConfigError(f"medium file {spec!r} does not exist")
    return read_coefficients(spec)


# binary formats --------------------------------------------------------------

def _header(tag: str, geometry: CellGeometry, **extra) -> bytes:
    fields = [tag, *(f"{k}={v}" for k, v in extra.items()),
              f"d={geometry.dim}",
              "l=" + ",".join(f"{x:.17g}" for x in geometry.lengths),
              "n=" + ",".join(str(n) for n in geometry.shape)]
    return (" ".join(fields) + "\n").encode()


def _read_header(fh, tag: str) -> dict[str, str]:
    line = fh.readline().decode().split()
    if not line or line[0] != tag:
        raise ConfigError(f"not a '{tag}' file")
    return dict(f.split("=", 1) for f in line[1:])


def _geometry_from(head: dict[str, str]) -> CellGeometry:
    lengths = tuple(float(x) for x in head["l"].split(","))
    shape = tuple(int(x) for x in head["n"].split(","))
    if int(head.get("d", len(shape))) != len(shape):
        raise ConfigError("header dimension does not match the grid")
    return CellGeometry(lengths, shape)


def write_coefficients(path, a: CoefficientField) -> None:
    data = np.moveaxis(a.sym, 0, -1).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_header("cellcoef", a.geometry))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_coefficients(path) -> CoefficientField:
    with open(path, "rb") as fh:
        geom = _geometry_from(_read_header(fh, "cellcoef"))
        d = geom.dim
        nsym = d * (d + 1) // 2
        raw = np.frombuffer(fh.read(), dtype="<f8")
    if raw.size != nsym * int(np.prod(geom.shape)):
        raise ConfigError(f"{path}: expected {nsym * np.prod(geom.shape)} values, found {raw.size}")
    sym = np.moveaxis(raw.reshape(geom.shape + (nsym,)), -1, 0)
    full = np.empty((d, d) + geom.shape)
    for pos, (i, j) in enumerate(T.multi_index_set(d, 2)):
        full[i - 1, j - 1] = full[j - 1, i - 1] = sym[pos]
    return CoefficientField(geom, full, name=os.path.basename(str(path)))


# fields ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CorrectorField:
    """Symmetric-tensor-valued cell field: one grid field per canonical multi-index."""

    order: int
    geometry: CellGeometry
    values: np.ndarray  # (N(d, order), *shape)

    def __post_init__(self):
        expected = (n_distinct(self.geometry.dim, self.order),) + self.geometry.shape
        if self.values.shape != expected:
            raise ValueError(f"corrector values have shape {self.values.shape}, expected {expected}")

    @classmethod
    def constant_one(cls, geometry: CellGeometry) -> "CorrectorField":
        return cls(0, geometry, np.ones((1,) + geometry.shape))

    @property
    def dim(self) -> int:
        return self.geometry.dim

    def component(self, idx) -> np.ndarray:
        return self.values[T.position(self.dim, idx)]

    def grad(self) -> np.ndarray:
        return self.geometry.box.grad(self.values)


def write_corrector(path, chi: CorrectorField) -> None:
    with open(path, "wb") as fh:
        fh.write(_header("corrector", chi.geometry, k=chi.order))
        for block in chi.values:
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def read_corrector(path) -> CorrectorField:
    with open(path, "rb") as fh:
        head = _read_header(fh, "corrector")
        geom = _geometry_from(head)
        k = int(head["k"])
        raw = np.frombuffer(fh.read(), dtype="<f8")
    shape = (n_distinct(geom.dim, k),) + geom.shape
    if raw.size != np.prod(shape):
        raise ConfigError(f"{path}: corrector data has {raw.size} values, expected {np.prod(shape)}")
    return CorrectorField(k, geom, raw.reshape(shape).copy())


@dataclass
class WeakRhs:
    """The functional ``w -> <f1, grad w> + <f0, w>``.

    ``scale`` is the size of the terms ``f0`` was assembled from; it sets the
    yardstick for the solvability check when those terms cancel.
    """

    f1: np.ndarray | None = None  # (d, *shape)
    f0: np.ndarray | None = None  # (*shape)
    scale: float = 0.0


def cell_mean(v: np.ndarray) -> float:
    return float(np.mean(v))


def _rms(v) -> float:
    return 0.0 if v is None else float(np.sqrt(np.mean(np.square(v))))


def solvability_residual(rhs: WeakRhs) -> float:
    return 0.0 if rhs.f0 is None else abs(cell_mean(rhs.f0))


def _strong_form(box: PeriodicBox, rhs: WeakRhs) -> np.ndarray:
    b = np.zeros(box.shape)
    if rhs.f1 is not None:
        b = b - box.div(rhs.f1)
    if rhs.f0 is not None:
        b = b + rhs.f0
    return box.project(b)


def solve_elliptic(a: CoefficientField, rhs: WeakRhs, tol: float = SOLVE_TOL,
                   maxiter: int = 5000) -> np.ndarray:
    """Zero-mean periodic solution of ``<a grad v, grad w> = <f1, grad w> + <f0, w>``.

    Raises SolvabilityViolated when the mean of ``f0`` is not negligible and
    IterationLimit when CG does not reach ``tol`` (relative residual).
    """
    box = a.geometry.box
    residual = solvability_residual(rhs)
    yardstick = max(_rms(rhs.f0), rhs.scale)
    if residual > SOLVABILITY_TOL * yardstick:
        raise SolvabilityViolated(
            f"mean of f0 is {residual:.3e} (terms of size {yardstick:.3e})"
        )
    b = _strong_form(box, rhs)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(box.shape)

    A = a.values
    abar = a.mean_matrix()
    symbol = sum(abar[m, n] * km * kn for m, km in enumerate(box.wavenumbers)
                 for n, kn in enumerate(box.wavenumbers))
    inv_symbol = np.where(box.kernel_mask, 0.0, 1.0 / np.where(box.kernel_mask, 1.0, symbol))

    def op(v):
        return -box.div(flux(box, A, box.grad(v)))

    def precond(r):
        return box.ifft(inv_symbol * box.fft(r))

    v = np.zeros(box.shape)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = np.vdot(r, z)
    for _ in range(maxiter):
        Ap = op(p)
        alpha = rz / np.vdot(p, Ap)
        v += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            break
        z = precond(r)
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    else:
        raise IterationLimit(f"CG did not reach {tol:g} in {maxiter} iterations "
                             f"(residual {np.linalg.norm(r) / bnorm:.2e})")
    return v - v.mean()


def rhs_order1(a: CoefficientField, i: int) -> WeakRhs:
    """Right-hand side of the first-order cell problem for axis ``i`` (1-based)."""
    return WeakRhs(f1=-a.values[:, i - 1], f0=None, scale=_rms(a.values[:, i - 1]))


def p_tensors(c: Sequence[SymTensor], count: int) -> list[SymTensor | None]:
    """p^0 .. p^{count-1}: p^{2r} = (-1)^r c^r, odd ones vanish (None)."""
    out: list[SymTensor | None] = []
    for j in range(count):
        if j % 2:
            out.append(None)
        elif j // 2 < len(c):
            out.append(c[j // 2] * (-1) ** (j // 2))
        else:
            raise NumericalError(f"p^{j} requested but only c^0..c^{len(c) - 1} are known")
    return out


def assemble_rhs(a: CoefficientField, k: int, chis: Sequence[CorrectorField],
                 p: Sequence[SymTensor | None]) -> list[WeakRhs]:
    """Symmetrized right-hand sides of all order-(k+1) cell problems, k >= 1.

    ``chis[j]`` is chi^j for j = 0..k (chi^0 the constant 1) and ``p`` holds
    p^0..p^{k-1}.  Output follows the canonical order of multi-indices.
    """
    if k < 1:
        raise ValueError("assemble_rhs needs k >= 1; use rhs_order1 for the first order")
    if len(chis) < k + 1:
        raise NumericalError(f"order-{k + 1} cell problems need correctors up to order {k}")
    if len(p) < k:
        raise NumericalError(f"order-{k + 1} cell problems need p^0..p^{k - 1}")
    d = a.dim
    box = a.geometry.box
    chi_k, chi_km1 = chis[k].values, chis[k - 1].values

    # f1_I = -S{ a e_{i1} chi^k_{i2..} }, one vector component at a time
    f1 = np.stack([-sym_outer([a.values[m], chi_k], (1, k), d) for m in range(d)])

    # e_{i1}.a grad chi^k_{i2..}
    fl = flux(box, a.values, box.grad(chi_k))          # (N_k, d, *shape)
    t_flux = symmetrize_blocks(np.swapaxes(fl, 0, 1), (1, k), d)
    # a_{i1 i2} chi^{k-1}_{i3..}
    t_mass = sym_outer([a.sym, chi_km1], (2, k - 1), d)
    # sum_j p^{k-1-j} (x) chi^j
    t_p = np.zeros_like(t_flux)
    for j in range(k):
        pj = p[k - 1 - j]
        if pj is None:
            continue
        t_p = t_p + sym_outer([pj.values, chis[j].values], (k + 1 - j, j), d)

    f0 = t_flux + t_mass - t_p
    axes = tuple(range(1, 1 + d))
    scale = (np.sqrt(np.mean(t_flux ** 2, axis=axes)) + np.sqrt(np.mean(t_mass ** 2, axis=axes))
             + np.sqrt(np.mean(t_p ** 2, axis=axes)))
    return [WeakRhs(f1=f1[:, pos], f0=f0[pos], scale=float(scale[pos])) for pos in range(f0.shape[0])]


def rhs_higher(a: CoefficientField, k: int, idx, chis: Sequence[CorrectorField],
               p: Sequence[SymTensor | None]) -> WeakRhs:
    """Right-hand side of the order-(k+1) cell problem for one multi-index."""
    if len(idx) != k + 1:
        raise ValueError(f"multi-index {idx} does not have length {k + 1}")
    return assemble_rhs(a, k, chis, p)[T.position(a.dim, idx)]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("LONGWAVE_THREADS", "1")))
    except ValueError:
        return 1


class CorrectorChain:
    """Correctors chi^0 (constant 1), chi^1, ... solved order by order.

    ``solves`` counts the cell problems solved so far (one per canonical
    multi-index).
    """

    def __init__(self, a: CoefficientField, tol: float = SOLVE_TOL):
        self.a = a
        self.tol = tol
        self.chis: list[CorrectorField] = [CorrectorField.constant_one(a.geometry)]
        self.solves = 0

    @property
    def order(self) -> int:
        return len(self.chis) - 1

    def __getitem__(self, k: int) -> CorrectorField:
        return self.chis[k]

    def _solve_all(self, rhss: list[WeakRhs]) -> np.ndarray:
        nthreads = min(_threads(), len(rhss))
        solve = lambda rhs: solve_elliptic(self.a, rhs, self.tol)  # noqa: E731
        if nthreads > 1:
            with ThreadPoolExecutor(nthreads) as pool:
                fields = list(pool.map(solve, rhss))
        else:
            fields = [solve(r) for r in rhss]
        self.solves += len(rhss)
        return np.stack(fields)

    def extend(self, c: Sequence[SymTensor]) -> CorrectorField:
        """Solve the next order; ``c`` must hold c^0..c^{floor((k-1)/2)} for order k+1."""
        k = self.order
        if k == 0:
            rhss = [rhs_order1(self.a, i) for i in range(1, self.a.dim + 1)]
        else:
            rhss = assemble_rhs(self.a, k, self.chis, p_tensors(c, k))
        chi = CorrectorField(k + 1, self.a.geometry, self._solve_all(rhss))
        self.chis.append(chi)
        return chi

    def extend_to(self, kmax: int, c: Sequence[SymTensor]) -> None:
        while self.order < kmax:
            self.extend(c)


def solve_corrector_chain(a: CoefficientField, kmax: int,
                          p_provider: Callable[[int], Sequence[SymTensor]],
                          tol: float = SOLVE_TOL) -> list[CorrectorField]:
    """chi^1..chi^kmax.  ``p_provider(k)`` returns c^0..c^m when order k+1 is solved."""
    chain = CorrectorChain(a, tol)
    while chain.order < kmax:
        k = chain.order
        chain.extend(p_provider(k) if k >= 1 else [])
    solve_corrector_chain.last_solves = chain.solves
    return chain.chis[1:]


def flux_moment(a: CoefficientField, chi_hi: CorrectorField, chi_lo: CorrectorField) -> SymTensor:
    """``S < a (grad chi_hi + e chi_lo), e >_Y``, an order (chi_lo.order + 2) tensor."""
    if chi_hi.order != chi_lo.order + 1:
        raise ValueError("chi_hi must be one order above chi_lo")
    d, m = a.dim, chi_lo.order
    box = a.geometry.box
    fl = box.mean(flux(box, a.values, chi_hi.grad()))             # (N_{m+1}, d)
    t_flux = symmetrize_blocks(fl.T, (1, m + 1), d)
    ab = a.sym.reshape(a.sym.shape[0], -1)
    lo = chi_lo.values.reshape(chi_lo.values.shape[0], -1)
    t_mass = symmetrize_blocks(ab @ lo.T / ab.shape[1], (2, m), d)
    return SymTensor(d, m + 2, t_flux + t_mass)


def odd_order_residual(a: CoefficientField, chi_2r: CorrectorField,
                       chi_2rm1: CorrectorField) -> float:
    """Max-norm of the symmetrized odd-order moment g^{2r-1}, which should vanish."""
    if chi_2r.order % 2:
        raise ValueError("chi_2r must have even order")
    return flux_moment(a, chi_2r, chi_2rm1).max_abs()
