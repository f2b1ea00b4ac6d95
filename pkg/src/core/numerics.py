# src/core/numerics.py

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import lu_factor
from scipy.special import erf, expit

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]]]

SKEW_TOLERANCE = 1e-12


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""
    pass


class NonFiniteError(ValueError):
    """Raised when NaN or Inf reaches a public constructor."""
    pass


def as_vector(values: ArrayLike, length: Optional[int] = None, name: str = "vector") -> np.ndarray:
    """Validate and convert input to a finite float64 vector."""
    if values is None:
        raise ValueError(f"{name} cannot be None")
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise TypeError(f"Could not convert {name} to a float array: {str(e)}")
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1D, got {arr.ndim}D")
    if length is not None and arr.shape[0] != length:
        raise DimensionError(f"Expected {name} of length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf entries")
    return arr


def as_matrix(values: ArrayLike, shape: Optional[Tuple[int, int]] = None, name: str = "matrix") -> np.ndarray:
    """Validate and convert input to a finite float64 matrix."""
    if values is None:
        raise ValueError(f"{name} cannot be None")
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise TypeError(f"Could not convert {name} to a float array: {str(e)}")
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2D, got {arr.ndim}D")
    if shape is not None and arr.shape != tuple(shape):
        raise DimensionError(f"Expected {name} of shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf entries")
    return arr


def as_points(values: ArrayLike, dim: int, name: str = "points") -> np.ndarray:
    """Accept one point of shape (dim,) or a batch of shape (B, dim)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.shape[-1] != dim:
        raise DimensionError(f"{name} must have shape ({dim},) or (batch, {dim}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf entries")
    return arr


def is_skew_symmetric(M: np.ndarray, tol: float = SKEW_TOLERANCE) -> bool:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        return False
    return float(np.max(np.abs(M + M.T), initial=0.0)) <= tol


def matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """M·v for one vector or row-wise for a batch of vectors."""
    M = np.asarray(M, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if M.ndim != 2:
        raise DimensionError(f"Matrix must be 2D, got {M.ndim}D")
    if v.shape[-1] != M.shape[1]:
        raise DimensionError(f"Cannot multiply {M.shape} matrix with vector of length {v.shape[-1]}")
    return v @ M.T


def det(M: np.ndarray) -> float:
    """Determinant from an LU factorization with partial pivoting."""
    M = as_matrix(M, name="M")
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"det needs a square matrix, got {M.shape}")
    if M.shape[0] == 0:
        return 1.0
    lu, piv = lu_factor(M, check_finite=False)
    swaps = int(np.count_nonzero(piv != np.arange(M.shape[0])))
    sign = -1.0 if swaps % 2 else 1.0
    return sign * float(np.prod(np.diag(lu)))


def singular_values(M: np.ndarray) -> np.ndarray:
    M = as_matrix(M, name="M")
    return np.linalg.svd(M, compute_uv=False)


def svd_extremes(M: np.ndarray) -> Tuple[float, float]:
    """(sigma_min, sigma_max) of a square matrix."""
    s = singular_values(M)
    return float(s[-1]), float(s[0])


def block_matrix(tl: np.ndarray, tr: np.ndarray, bl: np.ndarray, br: np.ndarray) -> np.ndarray:
    return np.block([[tl, tr], [bl, br]])


# ------------------------------------------------------------------------------
# Activation functions
# ------------------------------------------------------------------------------
@dataclass(frozen=True)
class Activation:
    """An activation sigma with its derivative and antiderivative sigma_tilde.

    sigma_tilde is the scalar potential whose derivative is sigma; it enters the
    Hamiltonian, while sigma enters the layer update.
    """
    name: str
    sigma: Callable[[np.ndarray], np.ndarray]
    sigma_prime: Callable[[np.ndarray], np.ndarray]
    sigma_tilde: Callable[[np.ndarray], np.ndarray]
    lipschitz_L: float
    is_sigmoidal: bool = False
    is_polynomial: bool = False
    kinks: Tuple[float, ...] = field(default=())


@lru_cache(maxsize=4)
def _gauss_legendre(points: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = leggauss(points)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _softplus_integral(x: np.ndarray) -> np.ndarray:
    # integral of softplus over [0, x] by 64-point Gauss-Legendre
    x = np.asarray(x, dtype=np.float64)
    nodes, weights = _gauss_legendre(64)
    t = x[..., None] * (nodes + 1.0) / 2.0
    return 0.5 * x * np.sum(weights * _softplus(t), axis=-1)


def _log_cosh(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(x, -x) - math.log(2.0)


def _tanh_prime(x: np.ndarray) -> np.ndarray:
    t = np.tanh(x)
    return 1.0 - t * t


def _logistic_prime(x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return s * (1.0 - s)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _relu_prime(x: np.ndarray) -> np.ndarray:
    # sigma'(0) := 0
    return (np.asarray(x) > 0.0).astype(np.float64)


def _relu_tilde(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * x * (x > 0.0)


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _rbf(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _rbf_prime(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return -x * _rbf(x)


def _rbf_tilde(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * erf(x / math.sqrt(2.0))


TANH = Activation(
    name="tanh",
    sigma=np.tanh,
    sigma_prime=_tanh_prime,
    sigma_tilde=_log_cosh,
    lipschitz_L=1.0,
    is_sigmoidal=True,
)

LOGISTIC = Activation(
    name="logistic",
    sigma=expit,
    sigma_prime=_logistic_prime,
    sigma_tilde=_softplus,
    lipschitz_L=0.25,
    is_sigmoidal=True,
)

SOFTPLUS = Activation(
    name="softplus",
    sigma=_softplus,
    sigma_prime=expit,
    sigma_tilde=_softplus_integral,
    lipschitz_L=1.0,
)

RELU = Activation(
    name="relu",
    sigma=_relu,
    sigma_prime=_relu_prime,
    sigma_tilde=_relu_tilde,
    lipschitz_L=1.0,
    kinks=(0.0,),
)

RBF = Activation(
    name="rbf",
    sigma=_rbf,
    sigma_prime=_rbf_prime,
    sigma_tilde=_rbf_tilde,
    lipschitz_L=1.0 / math.sqrt(2.0 * math.pi * math.e),
)

ACTIVATIONS: Dict[str, Activation] = {
    act.name: act for act in (TANH, LOGISTIC, SOFTPLUS, RELU, RBF)
}


def get_activation(name: str) -> Activation:
    try:
        return ACTIVATIONS[name.lower()]
    except KeyError:
        raise ValueError(f"Unknown activation '{name}'. Available: {', '.join(sorted(ACTIVATIONS))}")


def apply_activation(act: Activation, v: np.ndarray) -> np.ndarray:
    """Element-wise sigma."""
    return np.asarray(act.sigma(np.asarray(v, dtype=np.float64)), dtype=np.float64)


def check_activation(act: Activation, grid_points: int = 101, step: float = 1e-6,
                     kink_margin: float = 1e-3, seed: int = 0) -> Dict[str, float]:
    """Residuals of the registry invariants on [-4, 4].

    Returns the worst relative mismatch of d(sigma_tilde)/dx against sigma, of
    d(sigma)/dx against sigma_prime (kink neighbourhoods skipped), and the worst
    sampled ratio |sigma(a) - sigma(b)| / (L |a - b|).
    """
    x = np.linspace(-4.0, 4.0, grid_points)
    fd_tilde = (act.sigma_tilde(x + step) - act.sigma_tilde(x - step)) / (2.0 * step)
    sig = act.sigma(x)
    tilde_err = np.abs(fd_tilde - sig) / np.maximum(1.0, np.abs(sig))

    smooth = np.ones_like(x, dtype=bool)
    for k in act.kinks:
        smooth &= np.abs(x - k) > kink_margin
    fd_sigma = (act.sigma(x + step) - act.sigma(x - step)) / (2.0 * step)
    deriv = act.sigma_prime(x)
    prime_err = np.abs(fd_sigma - deriv) / np.maximum(1.0, np.abs(deriv))

    rng = np.random.default_rng(seed)
    a = rng.uniform(-4.0, 4.0, 1000)
    b = rng.uniform(-4.0, 4.0, 1000)
    ratio = np.abs(act.sigma(a) - act.sigma(b)) / (act.lipschitz_L * np.maximum(np.abs(a - b), 1e-300))

    return {
        "tilde_error": float(np.max(tilde_err)),
        "prime_error": float(np.max(prime_err[smooth])),
        "lipschitz_ratio": float(np.max(ratio)),
    }
