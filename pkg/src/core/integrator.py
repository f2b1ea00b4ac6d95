# src/core/integrator.py

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .hamiltonian import (
    HdnnModel,
    LayerParams,
    StructureTag,
    hamiltonian_gradient,
    vector_field,
)
from .numerics import Activation, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)


class NoConvergence(RuntimeError):
    """The implicit p-update did not reach the requested tolerance."""

    def __init__(self, residual: float, iterations: int, layer: Optional[int] = None):
        self.residual = float(residual)
        self.iterations = int(iterations)
        self.layer = layer
        where = f" in layer {layer}" if layer is not None else ""
        super().__init__(
            f"Fixed-point iteration did not converge{where}: residual {self.residual:.3e} "
            f"after {self.iterations} iterations"
        )


@dataclass(frozen=True)
class State:
    """Phase-space state x = (p, q); rows are samples when batched."""
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        if p.shape != q.shape or p.ndim not in (1, 2):
            raise DimensionError(f"p and q must share a 1D or 2D shape, got {p.shape} and {q.shape}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise NonFiniteError("State contains NaN or Inf entries")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def n(self) -> int:
        return self.p.shape[-1]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q], axis=-1)

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "State":
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] % 2:
            raise DimensionError(f"State vector needs even length, got {x.shape[-1]}")
        n = x.shape[-1] // 2
        return cls(x[..., :n], x[..., n:])


@dataclass(frozen=True)
class FixedPointConfig:
    tol: float = 1e-12
    max_iter: int = 100
    damping: float = 1.0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")


DEFAULT_FIXED_POINT = FixedPointConfig()


def _check(layer: LayerParams, s: State) -> None:
    if s.n != layer.n:
        raise DimensionError(f"State has n={s.n}, layer expects n={layer.n}")


def sie_step(layer: LayerParams, activation: Activation, h: float, s: State,
             cfg: FixedPointConfig = DEFAULT_FIXED_POINT) -> State:
    """One semi-implicit Euler layer.

    p+ = p + h [J grad H(p+, q)]_p   (implicit in p+)
    q+ = q + h [J grad H(p+, q)]_q   (explicit once p+ is known)

    The structured tags have a p-update that does not depend on p+, so they are
    evaluated in closed form.
    """
    _check(layer, s)
    sigma = activation.sigma
    f = layer.free

    if layer.structure is StructureTag.RESTRICTED:
        X, Wt = f["X"], f["W_tilde"]
        p_next = s.p + h * (f["eta_tilde"] @ X)
        q_next = s.q + h * ((sigma(p_next @ Wt.T + f["b_tilde"]) @ Wt) @ X.T)
        return State(p_next, q_next)

    if layer.structure is StructureTag.BLOCK_EXPLICIT:
        X, Wp, Wq = f["X"], f["W_p"], f["W_q"]
        v = sigma(s.q @ Wq.T + f["b_q"]) @ Wq + f["eta_q"]
        p_next = s.p - h * (v @ X)
        w = sigma(p_next @ Wp.T + f["b_p"]) @ Wp + f["eta_p"]
        q_next = s.q + h * (w @ X.T)
        return State(p_next, q_next)

    return _general_step(layer, activation, h, s, cfg)


def _general_step(layer: LayerParams, activation: Activation, h: float, s: State,
                  cfg: FixedPointConfig) -> State:
    n = layer.n
    Jp, Jq = layer.J[:n], layer.J[n:]

    def grad_at(p_next: np.ndarray) -> np.ndarray:
        return hamiltonian_gradient(layer, activation, np.concatenate([p_next, s.q], axis=-1))

    p_next = s.p.copy()
    residual = np.inf
    for iteration in range(1, cfg.max_iter + 1):
        candidate = s.p + h * (grad_at(p_next) @ Jp.T)
        residual = float(np.max(np.abs(candidate - p_next), initial=0.0))
        p_next = (1.0 - cfg.damping) * p_next + cfg.damping * candidate
        if not np.all(np.isfinite(p_next)):
            break
        if residual <= cfg.tol:
            q_next = s.q + h * (grad_at(p_next) @ Jq.T)
            return State(p_next, q_next)

    logger.error(f"Implicit update stalled at residual {residual:.3e}")
    raise NoConvergence(residual, cfg.max_iter)


def flow(model: HdnnModel, x0: State, cfg: FixedPointConfig = DEFAULT_FIXED_POINT) -> List[State]:
    """Trajectory [x_0, ..., x_N] of the discrete flow Phi_N."""
    trajectory = [x0]
    s = x0
    for j, layer in enumerate(model.layers):
        try:
            s = sie_step(layer, model.activation, model.h, s, cfg)
        except NoConvergence as e:
            raise NoConvergence(e.residual, e.iterations, layer=j) from e
        trajectory.append(s)
    return trajectory


def inject(xi: np.ndarray) -> State:
    """iota: xi -> (p, q) = (xi, 0)."""
    xi = np.asarray(xi, dtype=np.float64)
    return State(xi, np.zeros_like(xi))


def project(s: State) -> np.ndarray:
    """pi: (p, q) -> q."""
    return s.q


def restricted_flow(model: HdnnModel, xi: np.ndarray, cfg: FixedPointConfig = DEFAULT_FIXED_POINT) -> np.ndarray:
    """phi(xi) = q_N for the initial condition (xi, 0)."""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape[-1] != model.n:
        raise DimensionError(f"Expected inputs of dimension {model.n}, got {xi.shape[-1]}")
    s = inject(xi)
    for j, layer in enumerate(model.layers):
        try:
            s = sie_step(layer, model.activation, model.h, s, cfg)
        except NoConvergence as e:
            raise NoConvergence(e.residual, e.iterations, layer=j) from e
    return project(s)


def forward_euler_step(layer: LayerParams, activation: Activation, h: float, s: State) -> State:
    """x+ = x + h J grad H(x): explicit, not symplectic."""
    _check(layer, s)
    return State.from_vector(s.vector() + h * vector_field(layer, activation, s.vector()))


def gradient_flow_step(layer: LayerParams, activation: Activation, h: float, s: State) -> State:
    """x+ = x - h grad H(x): the dissipative residual-network counterpart."""
    _check(layer, s)
    return State.from_vector(s.vector() - h * hamiltonian_gradient(layer, activation, s.vector()))
