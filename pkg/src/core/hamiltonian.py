# src/core/hamiltonian.py

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .numerics import (
    Activation,
    DimensionError,
    as_matrix,
    as_points,
    as_vector,
    is_skew_symmetric,
)

logger = logging.getLogger(__name__)


class HamiltonianError(ValueError):
    """Base class for layer and model construction errors."""
    pass


class SkewSymmetryError(HamiltonianError):
    pass


class StructureError(HamiltonianError):
    pass


class StructureTag(str, Enum):
    GENERAL = "general"
    RESTRICTED = "restricted"
    BLOCK_EXPLICIT = "block_explicit"

    @classmethod
    def parse(cls, value) -> "StructureTag":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise StructureError(f"Unknown structure '{value}'. Available: {', '.join(t.value for t in cls)}")


def free_layout(structure: StructureTag, n: int) -> Dict[str, Tuple[int, ...]]:
    """Names and shapes of the trainable parameters of one layer."""
    m = 2 * n
    if structure is StructureTag.GENERAL:
        return {
            "J_lower": (m * (m - 1) // 2,),
            "W": (m, m),
            "b": (m,),
            "eta": (m,),
        }
    if structure is StructureTag.RESTRICTED:
        return {
            "X": (n, n),
            "W_tilde": (n, n),
            "b_tilde": (n,),
            "eta_tilde": (n,),
        }
    return {
        "X": (n, n),
        "W_p": (n, n),
        "W_q": (n, n),
        "b_p": (n,),
        "b_q": (n,),
        "eta_p": (n,),
        "eta_q": (n,),
    }


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def _structured_J(X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    zero = np.zeros((n, n))
    return np.block([[zero, -X.T], [X, zero]])


class LayerParams:
    """Weights theta_j = {J, W, b, eta} of one layer.

    Only the free parameters are stored; the full 2n x 2n matrices are rebuilt
    from them, so J is skew-symmetric by construction. GENERAL layers keep the
    strict lower triangle L of J (J = L - L^T); the structured tags keep X and
    use J = [[0, -X^T], [X, 0]].
    """

    def __init__(self, structure: StructureTag, n: int, free: Mapping[str, np.ndarray]):
        self.structure = StructureTag.parse(structure)
        if int(n) < 1:
            raise DimensionError(f"Half state dimension must be positive, got {n}")
        self.n = int(n)
        layout = free_layout(self.structure, self.n)
        missing = set(layout) - set(free)
        extra = set(free) - set(layout)
        if missing or extra:
            raise StructureError(
                f"{self.structure.value} layer expects parameters {sorted(layout)}, "
                f"missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        params: Dict[str, np.ndarray] = {}
        for name, shape in layout.items():
            if len(shape) == 1:
                params[name] = _frozen(as_vector(free[name], shape[0], name=name))
            else:
                params[name] = _frozen(as_matrix(free[name], shape, name=name))
        self.free = params
        self.J, self.W, self.b, self.eta = (_frozen(a) for a in self._assemble())

    def _assemble(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        n, m, f = self.n, 2 * self.n, self.free
        if self.structure is StructureTag.GENERAL:
            L = np.zeros((m, m))
            L[np.tril_indices(m, -1)] = f["J_lower"]
            return L - L.T, f["W"], f["b"], f["eta"]
        J = _structured_J(f["X"])
        zero = np.zeros((n, n))
        if self.structure is StructureTag.RESTRICTED:
            W = np.block([[f["W_tilde"], zero], [zero, zero]])
            b = np.concatenate([f["b_tilde"], np.zeros(n)])
            eta = np.concatenate([np.zeros(n), -f["eta_tilde"]])
            return J, W, b, eta
        W = np.block([[f["W_p"], zero], [zero, f["W_q"]]])
        b = np.concatenate([f["b_p"], f["b_q"]])
        eta = np.concatenate([f["eta_p"], f["eta_q"]])
        return J, W, b, eta

    # --------------------------------------------------------------------------
    # Constructors
    # --------------------------------------------------------------------------
    @classmethod
    def general(cls, J, W, b, eta) -> "LayerParams":
        J = as_matrix(J, name="J")
        m = J.shape[0]
        if m % 2 or J.shape[1] != m:
            raise DimensionError(f"J must be square with even size, got {J.shape}")
        if not is_skew_symmetric(J):
            raise SkewSymmetryError(f"J is not skew-symmetric: max|J + J^T| = {np.max(np.abs(J + J.T)):.3e}")
        return cls(StructureTag.GENERAL, m // 2, {
            "J_lower": J[np.tril_indices(m, -1)],
            "W": W,
            "b": b,
            "eta": eta,
        })

    @classmethod
    def restricted(cls, X, W_tilde, b_tilde, eta_tilde) -> "LayerParams":
        X = as_matrix(X, name="X")
        return cls(StructureTag.RESTRICTED, X.shape[0], {
            "X": X,
            "W_tilde": W_tilde,
            "b_tilde": b_tilde,
            "eta_tilde": eta_tilde,
        })

    @classmethod
    def block_explicit(cls, X, W_p, W_q, b_p=None, b_q=None, eta_p=None, eta_q=None) -> "LayerParams":
        X = as_matrix(X, name="X")
        n = X.shape[0]
        zeros = np.zeros(n)
        return cls(StructureTag.BLOCK_EXPLICIT, n, {
            "X": X,
            "W_p": W_p,
            "W_q": W_q,
            "b_p": zeros if b_p is None else b_p,
            "b_q": zeros if b_q is None else b_q,
            "eta_p": zeros if eta_p is None else eta_p,
            "eta_q": zeros if eta_q is None else eta_q,
        })

    @classmethod
    def zeros(cls, structure: StructureTag, n: int) -> "LayerParams":
        structure = StructureTag.parse(structure)
        return cls(structure, n, {name: np.zeros(shape) for name, shape in free_layout(structure, n).items()})

    def as_general(self) -> "LayerParams":
        """Same full matrices, solved through the implicit GENERAL update."""
        return LayerParams.general(self.J, self.W, self.b, self.eta)

    def replace(self, **updates: np.ndarray) -> "LayerParams":
        free = dict(self.free)
        free.update(updates)
        return LayerParams(self.structure, self.n, free)

    @property
    def num_free(self) -> int:
        return sum(a.size for a in self.free.values())

    def __repr__(self) -> str:
        return f"LayerParams(structure={self.structure.value}, n={self.n})"


@dataclass(frozen=True)
class HdnnModel:
    """A depth-N stack of layers sharing the step size h."""
    n: int
    depth: int
    h: float
    activation: Activation
    layers: Tuple[LayerParams, ...]
    structure: StructureTag

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "structure", StructureTag.parse(self.structure))
        if self.n < 1 or self.depth < 1:
            raise DimensionError(f"n and depth must be positive, got n={self.n}, depth={self.depth}")
        if len(self.layers) != self.depth:
            raise StructureError(f"Expected {self.depth} layers, got {len(self.layers)}")
        if not np.isfinite(self.h) or self.h <= 0:
            raise HamiltonianError(f"Step size must be positive and finite, got {self.h}")
        for j, layer in enumerate(self.layers):
            if layer.n != self.n:
                raise DimensionError(f"Layer {j} has n={layer.n}, model has n={self.n}")
            if layer.structure is not self.structure:
                raise StructureError(
                    f"Layer {j} is tagged {layer.structure.value}, model is {self.structure.value}"
                )

    @property
    def horizon(self) -> float:
        return self.depth * self.h

    def free_labels(self) -> List[Tuple[int, str, int]]:
        """(layer, parameter name, flat index) for every free scalar, in vector order."""
        labels = []
        for j, layer in enumerate(self.layers):
            for name, arr in layer.free.items():
                labels.extend((j, name, k) for k in range(arr.size))
        return labels

    def free_vector(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for layer in self.layers for arr in layer.free.values()])

    def with_free_vector(self, theta: np.ndarray) -> "HdnnModel":
        theta = np.asarray(theta, dtype=np.float64)
        layout = free_layout(self.structure, self.n)
        per_layer = sum(int(np.prod(s)) for s in layout.values())
        if theta.shape != (per_layer * self.depth,):
            raise DimensionError(f"Expected {per_layer * self.depth} parameters, got {theta.shape}")
        layers = []
        offset = 0
        for _ in range(self.depth):
            free = {}
            for name, shape in layout.items():
                size = int(np.prod(shape))
                free[name] = theta[offset:offset + size].reshape(shape)
                offset += size
            layers.append(LayerParams(self.structure, self.n, free))
        return HdnnModel(self.n, self.depth, self.h, self.activation, tuple(layers), self.structure)

    def with_layers(self, layers: Sequence[LayerParams]) -> "HdnnModel":
        return HdnnModel(self.n, len(layers), self.h, self.activation, tuple(layers), self.structure)

    def as_general(self) -> "HdnnModel":
        return HdnnModel(self.n, self.depth, self.h, self.activation,
                         tuple(layer.as_general() for layer in self.layers), StructureTag.GENERAL)


# ------------------------------------------------------------------------------
# Hamiltonian, gradient and vector field
# ------------------------------------------------------------------------------
def _check_state(params: LayerParams, x: np.ndarray) -> np.ndarray:
    return as_points(x, 2 * params.n, name="x")


def hamiltonian_value(params: LayerParams, act: Activation, x: np.ndarray) -> np.ndarray:
    """H(x) = sigma_tilde(W x + b)^T 1 + eta^T x (per row for a batch)."""
    x = _check_state(params, x)
    z = x @ params.W.T + params.b
    value = np.sum(act.sigma_tilde(z), axis=-1) + x @ params.eta
    return value if value.ndim else float(value)


def hamiltonian_gradient(params: LayerParams, act: Activation, x: np.ndarray) -> np.ndarray:
    """dH/dx = W^T sigma(W x + b) + eta."""
    x = _check_state(params, x)
    z = x @ params.W.T + params.b
    return act.sigma(z) @ params.W + params.eta


def hamiltonian_hessian(params: LayerParams, act: Activation, x: np.ndarray) -> np.ndarray:
    """W^T diag(sigma'(W x + b)) W for a single state."""
    x = as_vector(x, 2 * params.n, name="x")
    d = act.sigma_prime(params.W @ x + params.b)
    return params.W.T @ (d[:, None] * params.W)


def vector_field(params: LayerParams, act: Activation, x: np.ndarray) -> np.ndarray:
    """J dH/dx."""
    if not is_skew_symmetric(params.J):
        raise SkewSymmetryError("Layer J lost skew-symmetry")
    return hamiltonian_gradient(params, act, x) @ params.J.T


def canonical_J(n: int) -> np.ndarray:
    """J_c = [[0, -I], [I, 0]]."""
    return _structured_J(np.eye(n))
