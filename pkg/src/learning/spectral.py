# src/learning/spectral.py

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from ..data.datasets import BoxDomain, TargetFunction

logger = logging.getLogger(__name__)

FOURIER_CONVENTION = "f(x) = int exp(i w.x) F(w) dw, F(w) = (2 pi)^-n int exp(-i w.x) f(x) dx"


class TruncationTooTight(RuntimeError):
    """The truncated quadrature misses a significant part of the integral."""

    def __init__(self, message: str, tail: float, integral: float):
        self.tail = float(tail)
        self.integral = float(integral)
        super().__init__(f"{message}: tail {self.tail:.3e}, integral {self.integral:.3e}")


@dataclass(frozen=True)
class QuadratureConfig:
    spatial_radius: Optional[float] = None
    spatial_panels: int = 48
    spatial_points: int = 12
    frequency_panels: int = 32
    frequency_points: int = 8
    truncation_radius: float = 12.0
    fd_step: float = 1e-5
    tail_ratio: float = 0.1
    boundary_ratio: float = 1e-3

    def __post_init__(self):
        if self.frequency_panels % 2:
            raise ValueError("frequency_panels must be even so that w = 0 is a panel boundary")
        if min(self.spatial_panels, self.spatial_points, self.frequency_points) < 1:
            raise ValueError("Quadrature sizes must be positive")
        if not self.truncation_radius > 0:
            raise ValueError(f"truncation_radius must be positive, got {self.truncation_radius}")


@dataclass(frozen=True)
class SpectralProfile:
    cf_estimate: float
    quadrature_nodes: int
    truncation_radius: float
    tail_estimate: float
    spatial_radius: float
    convention: str = FOURIER_CONVENTION


def composite_gauss_legendre(a: float, b: float, panels: int, points: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of a composite Gauss-Legendre rule on [a, b]."""
    t, w = leggauss(points)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _partials(target: TargetFunction, points: np.ndarray, step: float) -> np.ndarray:
    """Central differences d f_k / d x_i, shape (out_dim, n, len(points))."""
    out = np.empty((target.out_dim, target.n, points.shape[0]))
    for i in range(target.n):
        shift = np.zeros(target.n)
        shift[i] = step
        diff = (target(points + shift) - target(points - shift)) / (2.0 * step)
        out[:, i, :] = diff.T
    return out


def _grid(axis_nodes: np.ndarray, n: int) -> np.ndarray:
    mesh = np.meshgrid(*([axis_nodes] * n), indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, n)


def _moment(grads: np.ndarray, x: np.ndarray, wx: np.ndarray, n: int, radius: float,
            panels: int, points: int) -> float:
    omega, w_omega = composite_gauss_legendre(-radius, radius, panels, points)
    kernel = np.exp(-1j * np.outer(omega, x)) * wx[None, :]
    if n == 1:
        transform = grads @ kernel.T
        norms = np.sqrt(np.sum(np.abs(transform) ** 2, axis=0))
        per_partial = norms @ w_omega
    else:
        transform = kernel @ grads @ kernel.T
        norms = np.sqrt(np.sum(np.abs(transform) ** 2, axis=0))
        per_partial = np.einsum("a,iab,b->i", w_omega, norms, w_omega)
    return float(np.sum(per_partial)) / (2.0 * math.pi) ** n


def estimate_cf(target: TargetFunction, dom: BoxDomain, quad: QuadratureConfig = QuadratureConfig()) -> SpectralProfile:
    """First absolute moment C_f = int ||w||_1 ||F(w)|| dw by quadrature.

    Computed as sum_i int ||F[d_i f](w)|| dw, so constants contribute exactly 0.
    The spatial transform runs over the box [-R_s, R_s]^n and the frequency
    integral is truncated at truncation_radius; the tail is estimated by
    repeating the frequency integral at 1.5x the radius.
    """
    n = target.n
    if n > 2:
        raise ValueError(f"C_f quadrature supports n <= 2, got n={n}")
    if dom.n != n:
        raise ValueError(f"Domain dimension {dom.n} does not match target dimension {n}")

    radius_s = quad.spatial_radius or target.spatial_radius or float(np.max(np.abs([dom.lo, dom.hi])))
    x, wx = composite_gauss_legendre(-radius_s, radius_s, quad.spatial_panels, quad.spatial_points)
    nodes = x.size ** n

    grads = _partials(target, _grid(x, n), quad.fd_step)
    interior = float(np.max(np.abs(grads)))
    if interior == 0.0:
        logger.info(f"Target {target.name} has zero gradient; C_f = 0")
        return SpectralProfile(0.0, nodes, quad.truncation_radius, 0.0, radius_s)

    faces = []
    for i in range(n):
        for sign in (-1.0, 1.0):
            face = _grid(x, n) if n > 1 else np.zeros((1, 1))
            face[:, i] = sign * radius_s
            faces.append(face)
    boundary = float(np.max(np.abs(_partials(target, np.unique(np.concatenate(faces), axis=0), quad.fd_step))))
    if boundary > quad.boundary_ratio * interior:
        raise TruncationTooTight(f"Target {target.name} has gradient mass on the spatial boundary |x| = {radius_s}",
                                 boundary, interior)

    grads = grads.reshape(target.out_dim, n, *([x.size] * n))
    integral = _moment(grads, x, wx, n, quad.truncation_radius, quad.frequency_panels, quad.frequency_points)
    outer_panels = 2 * int(round(0.75 * quad.frequency_panels))
    extended = _moment(grads, x, wx, n, 1.5 * quad.truncation_radius, outer_panels, quad.frequency_points)
    tail = abs(extended - integral)
    if tail > quad.tail_ratio * integral:
        raise TruncationTooTight(f"Frequency truncation at {quad.truncation_radius} is too tight", tail, integral)

    logger.info(f"C_f({target.name}) = {integral:.6g} (tail {tail:.2e}, {nodes} spatial nodes)")
    return SpectralProfile(integral, nodes, quad.truncation_radius, tail, radius_s)
