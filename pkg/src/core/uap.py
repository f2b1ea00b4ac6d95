# src/core/uap.py

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np
from scipy.linalg import qr

from ..data.datasets import BoxDomain, low_discrepancy
from .hamiltonian import HdnnModel, LayerParams, StructureTag
from .integrator import DEFAULT_FIXED_POINT, FixedPointConfig, restricted_flow
from .numerics import Activation, DimensionError, as_matrix, as_points, as_vector, svd_extremes

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10
MAX_REPAIR_ATTEMPTS = 16


class UapError(Exception):
    """Base class for shallow-sum construction errors."""
    pass


class WrongStructure(UapError):
    pass


class NotRepresentable(UapError):
    """A shallow sum outside the image of the restricted HDNN map."""

    def __init__(self, message: str, certificate: float):
        self.certificate = float(certificate)
        super().__init__(f"{message} (certificate {self.certificate:.3e})")


class SingularW(UapError):
    pass


class RepairFailed(UapError):
    pass


@dataclass(frozen=True)
class ShallowTerm:
    A: np.ndarray
    W: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class ShallowSum:
    """g(x) = sum_j A_j sigma(W_j x + b_j)."""
    terms: tuple
    activation: Activation

    def __post_init__(self):
        terms = []
        n = None
        for j, t in enumerate(self.terms):
            A = as_matrix(t.A, name=f"A_{j}")
            n = A.shape[0] if n is None else n
            terms.append(ShallowTerm(
                as_matrix(A, (n, n), name=f"A_{j}"),
                as_matrix(t.W, (n, n), name=f"W_{j}"),
                as_vector(t.b, n, name=f"b_{j}"),
            ))
        if not terms:
            raise DimensionError("A shallow sum needs at least one term")
        object.__setattr__(self, "terms", tuple(terms))

    @property
    def n(self) -> int:
        return self.terms[0].A.shape[0]

    def __len__(self) -> int:
        return len(self.terms)


def shallow_eval(g: ShallowSum, x: np.ndarray) -> np.ndarray:
    x = as_points(x, g.n, name="x")
    total = np.zeros_like(x)
    for t in g.terms:
        total = total + g.activation.sigma(x @ t.W.T + t.b) @ t.A.T
    return total


# ------------------------------------------------------------------------------
# HDNN <-> shallow sum
# ------------------------------------------------------------------------------
def to_shallow_sum(model: HdnnModel) -> ShallowSum:
    """Rewrite a restricted model as the shallow sum computing its restricted flow.

    p_{j+1} = xi + r_j with r_j the running sum of gamma_j = h X^T eta_j, so
    q_N = sum_j h X W_j^T sigma(W_j xi + W_j r_j + b_j).
    """
    if model.structure is not StructureTag.RESTRICTED:
        raise WrongStructure(f"Expected a restricted model, got {model.structure.value}")
    h = model.h
    shift = np.zeros(model.n)
    terms = []
    for layer in model.layers:
        f = layer.free
        X, Wt = f["X"], f["W_tilde"]
        shift = shift + h * X.T @ f["eta_tilde"]
        terms.append(ShallowTerm(h * X @ Wt.T, Wt, Wt @ shift + f["b_tilde"]))
    return ShallowSum(tuple(terms), model.activation)


def from_shallow_sum(g: ShallowSum, h: float, X: np.ndarray) -> HdnnModel:
    """Restricted model with a single shared X whose restricted flow is g.

    Only sums of the form A_j = h X W_j^T are representable; biases are set to
    zero and the offsets d_j are carried by eta.
    """
    if not np.isfinite(h) or h <= 0:
        raise ValueError(f"Step size must be positive and finite, got {h}")
    n = g.n
    X = as_matrix(X, (n, n), name="X")
    smin, smax = svd_extremes(X)
    if smin <= RANK_TOLERANCE * max(smax, 1.0):
        raise NotRepresentable("X is singular", smin)

    for j, t in enumerate(g.terms):
        gap = float(np.max(np.abs(t.A - h * X @ t.W.T)))
        if gap > 1e-10 * max(1.0, float(np.max(np.abs(t.A)))):
            raise NotRepresentable(f"Term {j} is not of the form A = h X W^T", gap)

    hXt = h * X.T
    layers: List[LayerParams] = []
    previous = np.zeros(n)
    for j, t in enumerate(g.terms):
        w_min, w_max = svd_extremes(t.W)
        if w_min <= RANK_TOLERANCE * max(w_max, 1.0):
            raise SingularW(f"W_{j} is singular (sigma_min {w_min:.3e}); run rank_repair first")
        shift = np.linalg.solve(t.W, t.b)
        eta = np.linalg.solve(hXt, shift - previous)
        previous = shift
        layers.append(LayerParams.restricted(X, t.W, np.zeros(n), eta))
    return HdnnModel(n, len(layers), float(h), g.activation, tuple(layers), StructureTag.RESTRICTED)


@dataclass
class ComponentForm:
    """g_i(x) = sum_j alpha[j, i] sigma(w[j, i] . x + beta[j, i])."""
    alpha: np.ndarray
    w: np.ndarray
    beta: np.ndarray
    activation: Activation

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        pre = np.einsum("jik,bk->bji", self.w, x) + self.beta
        return np.einsum("ji,bji->bi", self.alpha, self.activation.sigma(pre))


def component_form(g: ShallowSum) -> ComponentForm:
    off = max(float(np.max(np.abs(t.A - np.diag(np.diag(t.A))))) for t in g.terms)
    if off > 0.0:
        raise NotRepresentable("Component form needs diagonal outer weights", off)
    return ComponentForm(
        alpha=np.stack([np.diag(t.A) for t in g.terms]),
        w=np.stack([t.W for t in g.terms]),
        beta=np.stack([t.b for t in g.terms]),
        activation=g.activation,
    )


# ------------------------------------------------------------------------------
# Full-rank repair
# ------------------------------------------------------------------------------
@dataclass
class RankRepairReport:
    repaired: ShallowSum
    perturbation_norms: Dict[int, np.ndarray]
    bound_used: Dict[int, float]
    deficient_terms: Dict[int, int]
    zero_a_terms: List[int] = field(default_factory=list)
    sampled_sup_deviation: float = 0.0
    attempts: Dict[int, int] = field(default_factory=dict)


def dependent_rows(W: np.ndarray) -> np.ndarray:
    """Indices of rows of W that are linearly dependent on the others (pivoted QR)."""
    _, R, piv = qr(W.T, pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return np.sort(piv)
    rank = int(np.count_nonzero(diag > RANK_TOLERANCE * diag[0]))
    return np.sort(piv[rank:])


def _is_full_rank(W: np.ndarray) -> bool:
    smin, smax = svd_extremes(W)
    return smax > 0.0 and smin >= RANK_TOLERANCE * smax


def _perturb(W: np.ndarray, rows: np.ndarray, cap: float, rng: np.random.Generator) -> np.ndarray:
    n = W.shape[0]
    keep = np.setdiff1d(np.arange(n), rows)
    if keep.size:
        Q, _ = np.linalg.qr(W[keep].T)
        projector = np.eye(n) - Q @ Q.T
    else:
        projector = np.eye(n)
    perturbation = np.zeros_like(W)
    for row in rows:
        direction = projector @ rng.standard_normal(n)
        perturbation[row] = cap * direction / np.linalg.norm(direction)
    return perturbation


def rank_repair(g: ShallowSum, eps_tilde: float, domain: BoxDomain, rng_seed: int = 0,
                sample_points: int = 10_000) -> RankRepairReport:
    """Make every inner weight W_j invertible at a sup-norm cost of at most eps_tilde on the domain.

    Each dependent row is moved by a vector orthogonal to the span of the
    independent rows, with Euclidean norm equal to the cap
    eps / (r * k * sqrt(n) * L * ||x|| * max_p ||a_p||), where k is the number of
    deficient terms, r the number of dependent rows of the term and a_p the
    rows of A. Terms with A = 0 take a unit perturbation instead.
    """
    if not eps_tilde > 0:
        raise ValueError(f"eps_tilde must be positive, got {eps_tilde}")
    if domain.n != g.n:
        raise DimensionError(f"Domain dimension {domain.n} does not match shallow sum dimension {g.n}")
    rng = np.random.default_rng(rng_seed)
    n = g.n
    x_norm = domain.max_norm()
    L = g.activation.lipschitz_L

    deficient = {j: dependent_rows(t.W) for j, t in enumerate(g.terms)}
    deficient = {j: rows for j, rows in deficient.items() if rows.size}
    k = len(deficient)

    terms = list(g.terms)
    report = RankRepairReport(g, {j: np.zeros(n) for j in range(len(terms))}, {},
                              {j: int(rows.size) for j, rows in deficient.items()})
    for j, rows in deficient.items():
        t = terms[j]
        a_norm = float(np.max(np.linalg.norm(t.A, axis=1)))
        if a_norm == 0.0:
            cap = np.inf
            scale = 1.0
            report.zero_a_terms.append(j)
            logger.info(f"Term {j} has zero outer weights; any full-rank W leaves g unchanged")
        else:
            cap = eps_tilde / (rows.size * k * np.sqrt(n) * L * max(x_norm, 1e-300) * a_norm)
            scale = cap

        for attempt in range(1, MAX_REPAIR_ATTEMPTS + 1):
            perturbation = _perturb(t.W, rows, scale, rng)
            W_new = t.W + perturbation
            if _is_full_rank(W_new):
                break
            logger.warning(f"Term {j}: repaired W still singular, resampling (attempt {attempt})")
        else:
            raise RepairFailed(f"Term {j} stayed singular after {MAX_REPAIR_ATTEMPTS} resamples")

        terms[j] = ShallowTerm(t.A, W_new, t.b)
        report.perturbation_norms[j] = np.linalg.norm(perturbation, axis=1)
        report.bound_used[j] = float(cap)
        report.attempts[j] = attempt

    repaired = ShallowSum(tuple(terms), g.activation)
    report.repaired = repaired
    points = np.concatenate([low_discrepancy(domain, sample_points), domain.corners()])
    deviation = np.linalg.norm(shallow_eval(repaired, points) - shallow_eval(g, points), axis=1)
    report.sampled_sup_deviation = float(np.max(deviation))
    if report.sampled_sup_deviation > eps_tilde:
        raise RepairFailed(
            f"Sampled deviation {report.sampled_sup_deviation:.3e} exceeds eps_tilde {eps_tilde:.3e}"
        )
    return report


# ------------------------------------------------------------------------------
# Output head
# ------------------------------------------------------------------------------
@dataclass(frozen=True)
class OutputHead:
    """Affine head v -> W_o^T v + b_o with W_o of shape (n, r)."""
    W_o: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        W_o = as_matrix(self.W_o, name="W_o")
        object.__setattr__(self, "W_o", W_o)
        object.__setattr__(self, "b_o", as_vector(self.b_o, W_o.shape[1], name="b_o"))

    @property
    def n(self) -> int:
        return self.W_o.shape[0]

    @property
    def r(self) -> int:
        return self.W_o.shape[1]

    @classmethod
    def identity(cls, n: int) -> "OutputHead":
        return cls(np.eye(n), np.zeros(n))


def head_apply(head: OutputHead, v: np.ndarray) -> np.ndarray:
    v = as_points(v, head.n, name="v")
    return v @ head.W_o + head.b_o


def head_compose(model: HdnnModel, head: OutputHead,
                 cfg: FixedPointConfig = DEFAULT_FIXED_POINT) -> Callable[[np.ndarray], np.ndarray]:
    if head.n != model.n:
        raise DimensionError(f"Head expects dimension {head.n}, model has n={model.n}")

    def composed(xi: np.ndarray) -> np.ndarray:
        return head_apply(head, restricted_flow(model, xi, cfg))

    return composed


def head_lipschitz(head: OutputHead) -> float:
    """Lipschitz constant of the affine head in the Euclidean norm."""
    return svd_extremes(head.W_o)[1] if min(head.W_o.shape) else 0.0


def max_deviation(model: HdnnModel, g: ShallowSum, points: Sequence[np.ndarray],
                  cfg: FixedPointConfig = DEFAULT_FIXED_POINT) -> float:
    """max over points of ||phi(xi) - g(xi)||_inf."""
    points = np.asarray(points, dtype=np.float64)
    return float(np.max(np.abs(restricted_flow(model, points, cfg) - shallow_eval(g, points))))
