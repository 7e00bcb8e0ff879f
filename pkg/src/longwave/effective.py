"""Tensors of the high-order effective wave equations.

For a stage count ``s`` the effective equation reads

    (1 + sum_r eps^2r b^2r D^2r) u_tt = div a0 grad u + sum_r eps^2r a^2r D^2r+2 u

(up to the sign conventions of the even-order derivatives), with positive
semidefinite a^2r, b^2r tied to the cell correctors through
``a^2r - b^2r (x) a0 = q^r`` up to symmetrization.  :class:`Pipeline` builds
these tensors stage by stage from the corrector chain, using only the
correctors chi^1..chi^{s+1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .cell import CoefficientField, CorrectorChain, CorrectorField, flux_moment, SOLVE_TOL
from .errors import ConfigError, ModelInvariantViolation, NumericalError
from .spectral import flux
from .tensor import SymTensor, matricize, min_eigenvalue, sym_power, tensor_product

#: tolerance of the constraint a^2r - b^2r (x) a0 = q^r
CONSTRAINT_TOL = 1e-9
#: tolerance of the positive semidefiniteness checks
PSD_TOL = 1e-12
#: allowed gap between the energy and flux forms of a0
A0_TOL = 1e-10


# building blocks -------------------------------------------------------------

def _field_means(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Matrix of grid means <left_p right_q> for stacked fields."""
    L = left.reshape(left.shape[0], -1)
    R = right.reshape(right.shape[0], -1)
    return L @ R.T / L.shape[1]


def homogenized_tensor(a: CoefficientField, chi1: CorrectorField) -> SymTensor:
    """a0_ij = < e_i . a (grad chi^1_j + e_j) >, symmetrized."""
    a0 = flux_moment(a, chi1, CorrectorField.constant_one(a.geometry))
    if min_eigenvalue(a0.to_matrix()) <= 0:
        raise NumericalError("homogenized tensor is not positive definite; the corrector solve is broken")
    return a0


def g_naive(a: CoefficientField, r: int, chi2r: CorrectorField, chi2rp1: CorrectorField) -> SymTensor:
    """S < a (grad chi^{2r+1} + e chi^{2r}), e >, the order 2r+2 tensor g^2r."""
    if chi2r.order != 2 * r or chi2rp1.order != 2 * r + 1:
        raise ValueError(f"g^{2 * r} needs correctors of orders {2 * r} and {2 * r + 1}")
    return flux_moment(a, chi2rp1, chi2r)


def _energy_term(a: CoefficientField, chi_hi: CorrectorField, chi_lo: CorrectorField) -> SymTensor:
    """S( -<a grad chi_hi . grad chi_hi> + <a_{i1 i2} chi_lo chi_lo> ) for chi_hi of order m+1."""
    d, m = a.dim, chi_lo.order
    box = a.geometry.box
    grad = chi_hi.grad()                                   # (N, d, *grid)
    fl = flux(box, a.values, grad)
    N = grad.shape[0]
    gg = _field_means(fl.reshape(N, -1), grad.reshape(N, -1)) * box.dim
    stiff = T.symmetrize_blocks(gg, (m + 1, m + 1), d)
    lo = chi_lo.values.reshape(chi_lo.values.shape[0], -1)
    asym = a.sym.reshape(a.sym.shape[0], -1)
    mass_raw = np.einsum("px,jx,kx->pjk", asym, lo, lo) / lo.shape[1]
    mass = T.symmetrize_blocks(mass_raw, (2, m, m), d)
    return SymTensor(d, 2 * m + 2, mass - stiff)


def _correlation(g: SymTensor, chi_a: CorrectorField, chi_b: CorrectorField) -> np.ndarray:
    """Canonical entries of S( g (x) <chi_a (x) chi_b> )."""
    P = _field_means(chi_a.values, chi_b.values)
    block = g.values[:, None, None] * P[None]
    return T.symmetrize_blocks(block, (g.order, chi_a.order, chi_b.order), g.dim)


def g_reduced(a: CoefficientField, r: int, chis: Sequence[CorrectorField],
              g_prev: Sequence[SymTensor]) -> SymTensor:
    """g^2r from the correctors chi^0..chi^{r+1} and the tensors g^0..g^{2r-2}.

    ``chis[j]`` is chi^j; ``g_prev[m]`` is g^{2m} (so g_prev[0] = a0).
    For r = 0 this is the energy form of a0.
    """
    if len(chis) < r + 2:
        raise NumericalError(f"g^{2 * r} needs correctors up to order {r + 1}")
    if len(g_prev) < r:
        raise NumericalError(f"g^{2 * r} needs g^0..g^{2 * (r - 1)}")
    d = a.dim
    kr = _energy_term(a, chis[r + 1], chis[r])
    out = kr.values * (-1) ** r
    for j in range(1, (r + 1) // 2 + 1):
        for l in range(1, (r + 1) // 2 + 1):
            out = out + _correlation(g_prev[r - j - l + 1], chis[2 * j - 1], chis[2 * l - 1])
    for j in range(1, r // 2 + 1):
        for l in range(1, r // 2 + 1):
            out = out - _correlation(g_prev[r - j - l], chis[2 * j], chis[2 * l])
    return SymTensor(d, 2 * r + 2, out)


def check_q(r: int, g2r: SymTensor, c_prev: Sequence[SymTensor], b_prev: Sequence[SymTensor]) -> SymTensor:
    """q^r = S((-1)^r g^2r + sum_{l=1}^{r-1} c^l (x) b^{2(r-l)}); q^1 = S(-g^2).

    ``c_prev`` holds c^1..c^{r-1}, ``b_prev`` holds b^2..b^{2(r-1)}.
    """
    if r < 1:
        raise ValueError("check_q needs r >= 1")
    if len(c_prev) < r - 1 or len(b_prev) < r - 1:
        raise NumericalError(f"q^{r} needs c^1..c^{r - 1} and b^2..b^{2 * (r - 1)}")
    q = g2r * (-1) ** r
    for l in range(1, r):
        q = q + tensor_product(c_prev[l - 1], b_prev[r - l - 1])
    return q


def psd_correction(checkq: SymTensor, a0: SymTensor, margin: float = 0.0):
    """Shift q^r along powers of a0 until it is positive semidefinite.

    Returns ``(a2r, b2r, deltastar)`` with ``b2r = delta S(a0^r)`` and
    ``a2r = q + delta S(a0^{r+1})``, where ``delta = deltastar + margin``.
    """
    if checkq.order % 2 or checkq.order < 4:
        raise ValueError("q^r must have even order >= 4")
    if margin < 0:
        raise ConfigError("delta margin must be nonnegative")
    r = checkq.order // 2 - 1
    a0_pow = sym_power(a0, r + 1)
    lam_a = min_eigenvalue(matricize(a0_pow))
    if lam_a <= 0:
        raise NumericalError(f"S(a0^{r + 1}) is not positive definite (min eigenvalue {lam_a:g})")
    deltastar = max(0.0, -min_eigenvalue(matricize(checkq)) / lam_a)
    delta = deltastar + margin
    b2r = sym_power(a0, r) * delta
    a2r = checkq + a0_pow * delta
    return a2r, b2r, deltastar


def c_recursion(a0: SymTensor, a2r: SymTensor, c_prev: Sequence[SymTensor],
                b_all: Sequence[SymTensor]) -> SymTensor:
    """c^r = S(a^2r - sum_{l=0}^{r-1} c^l (x) b^{2(r-l)}) with c^0 = a0.

    ``c_prev`` holds c^1..c^{r-1}; ``b_all`` holds b^2..b^2r.
    """
    r = a2r.order // 2 - 1
    cs = [a0, *c_prev[: r - 1]]
    out = a2r
    for l in range(r):
        out = out - tensor_product(cs[l], b_all[r - l - 1])
    return out


def savings_count(d: int, s: int) -> dict[str, int]:
    """Cell problems solved with the reduced formulas versus the direct ones."""
    if d < 1 or s < 1:
        raise ValueError("savings_count needs d >= 1 and s >= 1")
    cp = lambda k: math.comb(k + d, d) - 1  # noqa: E731
    solved, naive = cp(s + 1), cp(2 * s + 1)
    return {"solved": solved, "naive": naive, "spared": naive - solved}


# models ----------------------------------------------------------------------

@dataclass(frozen=True)
class Stage:
    r: int
    a2r: SymTensor
    b2r: SymTensor
    cr: SymTensor
    g2r: SymTensor
    checkq: SymTensor
    deltastar: float

    def tensors(self) -> dict[str, SymTensor]:
        return {"a2r": self.a2r, "b2r": self.b2r, "cr": self.cr, "g2r": self.g2r, "checkq": self.checkq}


@dataclass(frozen=True)
class EffectiveModel:
    dim: int
    alpha: int
    epsilon: float
    a0: SymTensor
    stages: tuple[Stage, ...] = ()
    info: dict = field(default_factory=dict, compare=False)

    @property
    def s(self) -> int:
        return len(self.stages)

    def truncate(self, s: int) -> "EffectiveModel":
        """The model built from the first ``s`` stages."""
        if not 0 <= s <= self.s:
            raise ValueError(f"cannot truncate a model with {self.s} stages to {s}")
        return replace(self, alpha=2 * s, stages=self.stages[:s])

    def with_epsilon(self, epsilon: float) -> "EffectiveModel":
        return replace(self, epsilon=float(epsilon))

    @property
    def qf(self) -> list[SymTensor]:
        return qf_coefficients(self.stages)

    def violations(self) -> list[str]:
        """Broken family requirements; empty when the model is admissible."""
        out = []
        if min_eigenvalue(self.a0.to_matrix()) <= 0:
            out.append("a0 is not positive definite")
        for st in self.stages:
            r = st.r
            if st.a2r.order != 2 * r + 2 or st.b2r.order != 2 * r:
                out.append(f"stage {r}: tensor orders are wrong")
                continue
            for name in ("a2r", "b2r"):
                t = getattr(st, name)
                if not T.is_psd(t, PSD_TOL):
                    out.append(f"stage {r}: {name} is not positive semidefinite "
                               f"(min eigenvalue {min_eigenvalue(matricize(t)):.3e})")
            if not T.sym_equal(st.a2r - tensor_product(st.b2r, self.a0), st.checkq, CONSTRAINT_TOL):
                out.append(f"stage {r}: constraint a2r - b2r (x) a0 = q is violated")
            if st.deltastar < 0:
                out.append(f"stage {r}: deltastar is negative")
        return out

    def validate(self) -> "EffectiveModel":
        bad = self.violations()
        if bad:
            raise ModelInvariantViolation("; ".join(bad))
        return self

    # text format
    def dumps(self) -> str:
        lines = ["[model]", f"d = {self.dim}", f"alpha = {self.alpha}", f"epsilon = {self.epsilon:.17g}"]
        for k, v in self.info.items():
            lines.append(f"{k} = {v}")
        lines += ["", "[a0]", T.dumps(self.a0).rstrip()]
        for st in self.stages:
            lines += ["", f"[stage {st.r}]", f"deltastar = {st.deltastar:.17g}"]
            for name, t in st.tensors().items():
                lines += [f"tensor {name}", T.dumps(t).rstrip()]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "EffectiveModel":
        sections: list[tuple[str, list[str]]] = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                sections.append((line[1:-1].strip(), []))
            elif not sections:
                raise ConfigError(f"model text starts outside a section: {line!r}")
            else:
                sections[-1][1].append(line)
        names = [s for s, _ in sections]
        if names[:2] != ["model", "a0"]:
            raise ConfigError("model text must start with [model] and [a0] sections")
        meta = dict(_key_value(ln) for ln in sections[0][1])
        try:
            dim, alpha, eps = int(meta.pop("d")), int(meta.pop("alpha")), float(meta.pop("epsilon"))
        except KeyError as e:
            raise ConfigError(f"[model] lacks {e}") from None
        a0 = T.loads("\n".join(sections[1][1]))
        stages = []
        for name, body in sections[2:]:
            head = name.split()
            if len(head) != 2 or head[0] != "stage":
                raise ConfigError(f"unknown model section [{name}]")
            r = int(head[1])
            tensors, deltastar, cur = {}, None, None
            for ln in body:
                if ln.startswith("tensor "):
                    cur = ln.split()[1]
                    tensors[cur] = []
                elif ln.startswith("deltastar"):
                    deltastar = float(_key_value(ln)[1])
                elif cur is None:
                    raise ConfigError(f"stray line in [stage {r}]: {ln!r}")
                else:
                    tensors[cur].append(ln)
            missing = {"a2r", "b2r", "cr", "g2r", "checkq"} - tensors.keys()
            if missing or deltastar is None:
                raise ConfigError(f"[stage {r}] is incomplete (missing {sorted(missing) or 'deltastar'})")
            stages.append(Stage(r, **{k: T.loads("\n".join(v)) for k, v in tensors.items()},
                                deltastar=deltastar))
        if [st.r for st in stages] != list(range(1, len(stages) + 1)):
            raise ConfigError("stages must be numbered 1, 2, ... in order")
        return cls(dim, alpha, eps, a0, tuple(stages), meta)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "EffectiveModel":
        try:
            with open(path) as fh:
                return cls.loads(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read model {path}: {e}") from None


def _key_value(line: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"expected 'key = value', got {line!r}")
    k, v = line.split("=", 1)
    return k.strip(), v.strip()


def qf_coefficients(stages: Sequence[Stage]) -> list[SymTensor]:
    """(-1)^r b^2r for r = 1..s."""
    return [st.b2r * (-1) ** st.r for st in stages]


def qf_multiplier(model: EffectiveModel, k) -> np.ndarray | float:
    """Fourier symbol 1 + sum_r eps^2r b^2r : k^2r of the operator Qf."""
    out = 1.0
    for st in model.stages:
        out = out + model.epsilon ** (2 * st.r) * T.contract_kpow(st.b2r, k)
    return out


# tensor pipeline -------------------------------------------------------------

class Pipeline:
    """Incremental construction of the effective tensors.

    Stage r solves the order r+1 cell problems, obtains g^2r from the reduced
    formula, and derives q^r, deltastar, a^2r, b^2r and c^r.
    """

    def __init__(self, a: CoefficientField, delta_margin: float = 0.0, tol: float = SOLVE_TOL):
        self.a = a
        self.delta_margin = float(delta_margin)
        self.chain = CorrectorChain(a, tol)
        self.chain.extend([])
        self.a0 = g_reduced(a, 0, self.chain.chis, [])
        a0_flux = homogenized_tensor(a, self.chain[1])
        self.a0_gap = (self.a0 - a0_flux).max_abs()
        if self.a0_gap > A0_TOL * (1 + a0_flux.max_abs()):
            raise NumericalError(f"energy and flux forms of a0 differ by {self.a0_gap:.3e}")
        self.stages: list[Stage] = []
        self.reduced_solves = self.chain.solves

    @property
    def c(self) -> list[SymTensor]:
        return [self.a0, *(st.cr for st in self.stages)]

    def add_stage(self) -> Stage:
        r = len(self.stages) + 1
        self.chain.extend_to(r + 1, self.c)
        self.reduced_solves = self.chain.solves
        g = g_reduced(self.a, r, self.chain.chis, [self.a0, *(st.g2r for st in self.stages)])
        q = check_q(r, g, [st.cr for st in self.stages], [st.b2r for st in self.stages])
        a2r, b2r, deltastar = psd_correction(q, self.a0, self.delta_margin)
        cr = c_recursion(self.a0, a2r, [st.cr for st in self.stages],
                         [*(st.b2r for st in self.stages), b2r])
        st = Stage(r, a2r, b2r, cr, g, q, deltastar)
        self.stages.append(st)
        return st

    def naive_g(self, r: int) -> SymTensor:
        """g^2r from the direct formula; solves cell problems up to order 2r+1."""
        if r - 1 > len(self.stages):
            raise NumericalError(f"direct g^{2 * r} needs stages up to {r - 1}")
        self.chain.extend_to(2 * r + 1, self.c)
        return g_naive(self.a, r, self.chain[2 * r], self.chain[2 * r + 1])

    def odd_residual(self, r: int) -> float:
        """Max-norm of the odd moment g^{2r-1}; vanishes for exact correctors."""
        self.chain.extend_to(2 * r, self.c)
        return flux_moment(self.a, self.chain[2 * r], self.chain[2 * r - 1]).max_abs()

    def model(self, alpha: int, epsilon: float) -> EffectiveModel:
        info = {"medium": self.a.name, "grid": "x".join(map(str, self.a.geometry.shape)),
                "cell_solves": self.reduced_solves, "a0_form_gap": f"{self.a0_gap:.3e}"}
        return EffectiveModel(self.a.dim, alpha, float(epsilon), self.a0, tuple(self.stages), info)


def algorithm1(a: CoefficientField, alpha: int, epsilon: float, naive_check: bool = False,
               delta_margin: float = 0.0, tol: float = SOLVE_TOL) -> EffectiveModel:
    """Effective model with floor(alpha/2) stages, validated against the family requirements.

    With ``naive_check`` the direct formula for every g^2r is evaluated as well
    (solving the extra cell problems) and the largest gap is recorded in
    ``model.info``.
    """
    if alpha < 0:
        raise ConfigError("alpha must be nonnegative")
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    pipe = Pipeline(a, delta_margin, tol)
    for _ in range(alpha // 2):
        pipe.add_stage()
    model = pipe.model(alpha, epsilon)
    if naive_check:
        gaps = []
        for st in pipe.stages:
            g = pipe.naive_g(st.r)
            gaps.append((st.g2r - g).max_abs() / (1 + g.max_abs()))
            model.info[f"naive_gap_{st.r}"] = f"{gaps[-1]:.3e}"
        model.info["naive_solves"] = pipe.chain.solves
        if gaps and max(gaps) > 1e-8:
            raise NumericalError(f"reduced and direct g tensors disagree (gap {max(gaps):.3e})")
    return model.validate()


# Bloch waves -----------------------------------------------------------------

def bloch_dispersion_1d(a: CoefficientField, k: float, N: int | None = None) -> float:
    """Lowest eigenvalue of -(d/dy + ik) a (d/dy + ik) on the periodic cell.

    Trigonometric collocation with ``N`` modes.  The eigenvalue is taken as
    the reciprocal of the largest eigenvalue of the inverse operator, which
    keeps its relative accuracy near k = 0.
    """
    if a.dim != 1:
        raise ConfigError("Bloch dispersion is implemented for one-dimensional media")
    ell = a.geometry.lengths[0]
    # the lowest band is periodic in k; reduce to the first Brillouin zone
    period = 2 * np.pi / ell
    k = k - period * np.round(k / period)
    if k == 0:
        return 0.0
    if N is None:
        N = a.geometry.shape[0]
    if N != a.geometry.shape[0]:
        a = a.with_shape((N,))
    inv_hat = np.fft.fft(1.0 / a.values[0, 0]) / N
    m = np.fft.fftfreq(N, 1.0 / N)
    K = 2 * np.pi * m / ell + k
    idx = np.arange(N)
    C = inv_hat[(idx[:, None] - idx[None, :]) % N]
    B = C / np.outer(K, K)
    B = 0.5 * (B + B.conj().T)
    return float(1.0 / np.linalg.eigvalsh(B)[-1])
