"""Fourier differentiation on uniform periodic boxes."""

from __future__ import annotations

from functools import cached_property

import numpy as np


class PeriodicBox:
    """Uniform grid on ``prod_i [0, lengths[i])`` with periodic identification.

    Derivatives are exact for trigonometric polynomials below the Nyquist
    frequency; the Nyquist wavenumber is dropped so that differentiation of
    real fields stays real and the discrete gradient is skew-adjoint.
    """

    def __init__(self, lengths, shape):
        self.lengths = tuple(float(x) for x in lengths)
        self.shape = tuple(int(n) for n in shape)
        if len(self.lengths) != len(self.shape):
            raise ValueError("lengths and shape must have the same dimension")
        if any(x <= 0 for x in self.lengths):
            raise ValueError(f"box lengths must be positive, got {self.lengths}")
        if any(n < 2 or n % 2 for n in self.shape):
            raise ValueError(f"points per dimension must be even and >= 2, got {self.shape}")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.lengths, self.shape))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def _axis_wavenumbers(self, axis: int, keep_nyquist: bool) -> np.ndarray:
        n, L = self.shape[axis], self.lengths[axis]
        last = axis == self.dim - 1
        k = 2 * np.pi * (np.fft.rfftfreq(n, L / n) if last else np.fft.fftfreq(n, L / n))
        if not keep_nyquist:
            k[n // 2 if not last else -1] = 0.0
        return k

    def _mesh(self, keep_nyquist: bool) -> tuple[np.ndarray, ...]:
        ks = [self._axis_wavenumbers(i, keep_nyquist) for i in range(self.dim)]
        return tuple(np.meshgrid(*ks, indexing="ij"))

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Per-axis wavenumbers on the half spectrum, Nyquist set to zero."""
        return self._mesh(keep_nyquist=False)

    @cached_property
    def kernel_mask(self) -> np.ndarray:
        """Modes annihilated by the discrete gradient (mean and pure Nyquist modes)."""
        mask = np.ones(self.wavenumbers[0].shape, dtype=bool)
        for k in self.wavenumbers:
            mask &= k == 0
        return mask

    def fft(self, v: np.ndarray) -> np.ndarray:
        return np.fft.rfftn(v, axes=tuple(range(-self.dim, 0)))

    def ifft(self, vh: np.ndarray) -> np.ndarray:
        return np.fft.irfftn(vh, s=self.shape, axes=tuple(range(-self.dim, 0)))

    def grad(self, v: np.ndarray) -> np.ndarray:
        """Gradient of a field (or a stack of fields); new axis before the grid axes."""
        vh = self.fft(v)
        return np.stack([self.ifft(1j * k * vh) for k in self.wavenumbers], axis=-self.dim - 1)

    def div(self, F: np.ndarray) -> np.ndarray:
        """Divergence of a vector field whose component axis precedes the grid axes."""
        acc = 0
        for m, k in enumerate(self.wavenumbers):
            acc = acc + 1j * k * self.fft(np.take(F, m, axis=-self.dim - 1))
        return self.ifft(acc)

    def project(self, v: np.ndarray) -> np.ndarray:
        """Remove the gradient kernel (mean and pure Nyquist modes)."""
        vh = self.fft(v)
        vh[..., self.kernel_mask] = 0.0
        return self.ifft(vh)

    def mean(self, v: np.ndarray) -> np.ndarray | float:
        return v.mean(axis=tuple(range(-self.dim, 0)))

    def inner(self, u: np.ndarray, w: np.ndarray) -> float:
        """L2 inner product by grid quadrature (exact for band-limited fields)."""
        return float(np.sum(u * w) * np.prod(self.spacing))

    def nodes(self, origin=None) -> tuple[np.ndarray, ...]:
        origin = (0.0,) * self.dim if origin is None else origin
        axes = [o + h * np.arange(n) for o, h, n in zip(origin, self.spacing, self.shape)]
        return tuple(np.meshgrid(*axes, indexing="ij"))


def flux(box: PeriodicBox, a: np.ndarray, grad_v: np.ndarray) -> np.ndarray:
    """``a grad v`` for a matrix field ``a`` of shape (d, d, *grid).

    ``grad_v`` has shape (..., d, *grid); the result has the same shape.
    """
    d = box.dim
    g = np.moveaxis(grad_v, -d - 1, 0)
    out = np.einsum("tm...,m...->t...", a, g)
    return np.moveaxis(out, 0, -d - 1)


def apply_elliptic(box: PeriodicBox, a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``div(a grad v)`` evaluated pseudo-spectrally."""
    return box.div(flux(box, a, box.grad(v)))
