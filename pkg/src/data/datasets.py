# src/data/datasets.py

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.stats import qmc

from ..core.numerics import DimensionError, as_vector

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Raised for unknown targets or invalid sampling requests."""
    pass


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box Omega = [lo, hi] in R^n."""
    n: int
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = as_vector(self.lo, self.n, name="lo")
        hi = as_vector(self.hi, self.n, name="hi")
        if not np.all(lo < hi):
            raise DatasetError(f"Box bounds must satisfy lo < hi component-wise, got lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cube(cls, n: int, lo: float = -1.0, hi: float = 1.0) -> "BoxDomain":
        return cls(n, np.full(n, float(lo)), np.full(n, float(hi)))

    def corners(self) -> np.ndarray:
        """All 2^n vertices, lexicographic in (lo, hi)."""
        return np.array(list(itertools.product(*zip(self.lo, self.hi))), dtype=np.float64)

    def max_norm(self) -> float:
        """||x||_{L_inf(Omega)} measured with the Euclidean norm of x."""
        return float(np.max(np.linalg.norm(self.corners(), axis=1)))

    def scale(self, unit_points: np.ndarray) -> np.ndarray:
        return self.lo + unit_points * (self.hi - self.lo)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)


@dataclass(frozen=True)
class TargetFunction:
    """A continuous target f: R^n -> R^m evaluated row-wise on (B, n) arrays."""
    name: str
    n: int
    f: Callable[[np.ndarray], np.ndarray]
    out_dim: int
    known_cf: Optional[float] = None
    cf_provenance: str = "none"
    spatial_radius: Optional[float] = None
    metadata: Dict[str, float] = field(default_factory=dict)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n:
            raise DimensionError(f"Target {self.name} expects dimension {self.n}, got {x.shape[-1]}")
        return self.f(x)


def gaussian_bump_cf(n: int, scale: float = 1.0) -> float:
    """Closed-form C_f of x -> exp(-||scale x||^2 / 2) * (1, ..., 1)."""
    return scale * n ** 1.5 * math.sqrt(2.0 / math.pi)


ANNULI_THRESHOLD = 0.65


def _sin_pi(n: int, **_) -> TargetFunction:
    # point masses of 1/2 at +-pi e_i, each weighted by ||omega||_1 = pi
    return TargetFunction("sin_pi", n, lambda x: np.sin(np.pi * x), n,
                          known_cf=n * math.pi, cf_provenance="closed_form")


def _gaussian_bump(n: int, scale: float = 1.0, **_) -> TargetFunction:
    def f(x: np.ndarray) -> np.ndarray:
        g = np.exp(-0.5 * np.sum((scale * x) ** 2, axis=-1))
        return np.repeat(g[..., None], n, axis=-1)

    return TargetFunction("gaussian_bump", n, f, n,
                          known_cf=gaussian_bump_cf(n, scale), cf_provenance="closed_form",
                          spatial_radius=10.0 / scale, metadata={"scale": float(scale)})


def _identity(n: int, **_) -> TargetFunction:
    return TargetFunction("identity", n, lambda x: np.array(x, dtype=np.float64, copy=True), n)


def _constant(n: int, value: float = 1.0, **_) -> TargetFunction:
    return TargetFunction("constant", n, lambda x: np.full(x.shape, float(value)), n,
                          known_cf=0.0, cf_provenance="closed_form", spatial_radius=5.0,
                          metadata={"value": float(value)})


def _annuli(n: int, **_) -> TargetFunction:
    if n != 2:
        raise DatasetError(f"The annuli target is two-dimensional, got n={n}")

    def f(x: np.ndarray) -> np.ndarray:
        outer = np.linalg.norm(x, axis=-1) > ANNULI_THRESHOLD
        return np.stack([~outer, outer], axis=-1).astype(np.float64)

    return TargetFunction("annuli", 2, f, 2)


TARGETS: Dict[str, Callable[..., TargetFunction]] = {
    "sin_pi": _sin_pi,
    "gaussian_bump": _gaussian_bump,
    "identity": _identity,
    "constant": _constant,
    "annuli": _annuli,
}


def get_target(name: str, n: int, **kwargs) -> TargetFunction:
    try:
        factory = TARGETS[name]
    except KeyError:
        raise DatasetError(f"Unknown target '{name}'. Available: {', '.join(sorted(TARGETS))}")
    return factory(n, **kwargs)


# ------------------------------------------------------------------------------
# Sampling
# ------------------------------------------------------------------------------
def low_discrepancy(dom: BoxDomain, count: int) -> np.ndarray:
    """Deterministic Halton points in the box."""
    sampler = qmc.Halton(d=dom.n, scramble=False)
    return dom.scale(sampler.random(count))


def sample_dataset(dom: BoxDomain, target: TargetFunction, count: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """(xi, f(xi)) pairs: the box corners first when count >= 2^n, then uniform draws."""
    if count < 1:
        raise DatasetError(f"count must be at least 1, got {count}")
    if target.n != dom.n:
        raise DimensionError(f"Target dimension {target.n} does not match domain dimension {dom.n}")
    rng = np.random.default_rng(seed)
    parts = []
    remaining = count
    if count >= 2 ** dom.n:
        corners = dom.corners()
        parts.append(corners)
        remaining -= corners.shape[0]
    parts.append(rng.uniform(dom.lo, dom.hi, size=(remaining, dom.n)))
    xi = np.concatenate(parts, axis=0)
    return xi, target(xi)


def evaluation_grid(dom: BoxDomain) -> np.ndarray:
    """Held-out points for sup-norm errors: 1001 (n=1), 33^2 (n=2) or 10^4 Halton points."""
    if dom.n == 1:
        return np.linspace(dom.lo[0], dom.hi[0], 1001)[:, None]
    if dom.n == 2:
        a = np.linspace(dom.lo[0], dom.hi[0], 33)
        b = np.linspace(dom.lo[1], dom.hi[1], 33)
        return np.stack(np.meshgrid(a, b, indexing="ij"), axis=-1).reshape(-1, 2)
    return low_discrepancy(dom, 10_000)


def make_annuli(points_per_class: int = 500, seed: int = 0,
                inner: Tuple[float, float] = (0.15, 0.5),
                outer: Tuple[float, float] = (0.8, 1.0)) -> Tuple[np.ndarray, np.ndarray]:
    """Two concentric rings in [-1, 1]^2 with integer labels 0 (inner) and 1 (outer)."""
    rng = np.random.default_rng(seed)
    xs, labels = [], []
    for label, (r_lo, r_hi) in enumerate((inner, outer)):
        radius = rng.uniform(r_lo, r_hi, points_per_class)
        angle = rng.uniform(0.0, 2.0 * np.pi, points_per_class)
        xs.append(np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1))
        labels.append(np.full(points_per_class, label))
    logger.debug(f"Generated {2 * points_per_class} annuli points")
    return np.concatenate(xs), np.concatenate(labels)


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    return np.eye(classes)[labels]
