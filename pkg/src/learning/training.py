# src/learning/training.py

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from ..core.gradients import backprop_trajectory
from ..core.hamiltonian import HdnnModel, LayerParams, StructureTag, free_layout
from ..core.integrator import DEFAULT_FIXED_POINT, FixedPointConfig, NoConvergence, flow, inject, restricted_flow
from ..core.numerics import Activation, DimensionError, NonFiniteError
from ..core.uap import OutputHead, head_apply
from ..data.datasets import BoxDomain, TargetFunction, evaluation_grid, sample_dataset
from .spectral import QuadratureConfig, TruncationTooTight, estimate_cf

logger = logging.getLogger(__name__)

THREADS_ENV = "HAMFLOW_THREADS"

# parameters drawn from U[-s, s]; everything else starts at zero
_RANDOM_PARAMS = {"J_lower", "W", "X", "W_tilde", "W_p", "W_q"}


class NonFiniteLoss(RuntimeError):
    """Training produced NaN/Inf."""

    def __init__(self, iteration: int, loss: float = float("nan")):
        self.iteration = int(iteration)
        self.loss = loss
        super().__init__(f"Non-finite loss {loss} at iteration {self.iteration}")


@dataclass(frozen=True)
class TrainConfig:
    depth: int = 16
    h: float = 0.1
    structure: StructureTag = StructureTag.RESTRICTED
    batch_size: int = 64
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 2000
    seed: int = 0
    init_scale: float = 1.0
    lr_factor: float = 0.5
    lr_patience: int = 200
    min_lr: float = 1e-6
    log_every: int = 500
    fixed_point: FixedPointConfig = DEFAULT_FIXED_POINT

    def __post_init__(self):
        object.__setattr__(self, "structure", StructureTag.parse(self.structure))
        if self.depth < 1 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("depth and batch_size must be positive and iterations non-negative")
        for name in ("h", "learning_rate", "init_scale", "lr_factor", "min_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"Decay rates must lie in [0, 1), got {self.beta1}, {self.beta2}")


@dataclass
class TrainResult:
    model: HdnnModel
    loss_history: np.ndarray
    best_loss: float
    best_iteration: int
    head: Optional[OutputHead] = None


def initialize_model(n: int, depth: int, h: float, activation: Activation,
                     structure: StructureTag = StructureTag.RESTRICTED,
                     init_scale: float = 1.0, seed: int = 0) -> HdnnModel:
    """Weights U[-s, s] with s = init_scale / sqrt(n); biases and eta start at zero."""
    structure = StructureTag.parse(structure)
    rng = np.random.default_rng(seed)
    s = init_scale / math.sqrt(n)
    layers = []
    for _ in range(depth):
        free = {}
        for name, shape in free_layout(structure, n).items():
            free[name] = rng.uniform(-s, s, size=shape) if name in _RANDOM_PARAMS else np.zeros(shape)
        layers.append(LayerParams(structure, n, free))
    return HdnnModel(n, depth, float(h), activation, tuple(layers), structure)


def initialize_head(n: int, r: int, init_scale: float = 1.0, seed: int = 0) -> OutputHead:
    rng = np.random.default_rng([seed, 1])
    s = init_scale / math.sqrt(n)
    return OutputHead(rng.uniform(-s, s, size=(n, r)), np.zeros(r))


def _head_vector(head: Optional[OutputHead]) -> np.ndarray:
    if head is None:
        return np.zeros(0)
    return np.concatenate([head.W_o.ravel(), head.b_o])


class Trainer:
    """Fits the restricted flow (optionally followed by an affine head) to data by MSE.

    Gradients come from the hand-derived reverse sweep; torch only supplies the
    Adam update and the plateau learning-rate schedule.
    """

    def __init__(self, config: TrainConfig):
        self.logger = logging.getLogger(__name__)
        self.config = config

    def _unpack(self, template: HdnnModel, head: Optional[OutputHead],
                theta: np.ndarray) -> Tuple[HdnnModel, Optional[OutputHead]]:
        k = theta.size - (0 if head is None else head.W_o.size + head.r)
        model = template.with_free_vector(theta[:k])
        if head is None:
            return model, None
        W_o = theta[k:k + head.W_o.size].reshape(head.W_o.shape)
        return model, OutputHead(W_o, theta[k + head.W_o.size:])

    def loss_and_grad(self, model: HdnnModel, head: Optional[OutputHead], xi: np.ndarray,
                      y: np.ndarray, with_grad: bool = True) -> Tuple[float, Optional[np.ndarray]]:
        """Mean squared error over samples and output components, with its gradient."""
        trajectory = flow(model, inject(xi), self.config.fixed_point)
        q_N = trajectory[-1].q
        out = q_N if head is None else head_apply(head, q_N)
        if out.shape != y.shape:
            raise DimensionError(f"Model output shape {out.shape} does not match targets {y.shape}")
        resid = out - y
        loss = float(np.mean(resid ** 2))
        if not with_grad or not math.isfinite(loss):
            return loss, None
        a_out = 2.0 * resid / resid.size
        if head is None:
            a_q = a_out
            head_grad = np.zeros(0)
        else:
            a_q = a_out @ head.W_o.T
            head_grad = np.concatenate([(q_N.T @ a_out).ravel(), a_out.sum(axis=0)])
        grads, _ = backprop_trajectory(model, trajectory, a_q)
        return loss, np.concatenate([grads.as_vector(), head_grad])

    def train(self, model_init: HdnnModel, xi: np.ndarray, y: np.ndarray,
              head_init: Optional[OutputHead] = None) -> TrainResult:
        cfg = self.config
        xi = np.asarray(xi, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if xi.ndim != 2 or xi.shape[1] != model_init.n or y.shape[0] != xi.shape[0]:
            raise DimensionError(f"Inputs {xi.shape} and targets {y.shape} do not fit a model with n={model_init.n}")

        theta0 = np.concatenate([model_init.free_vector(), _head_vector(head_init)])
        param = torch.nn.Parameter(torch.from_numpy(theta0.copy()))
        optimizer = torch.optim.Adam([param], lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
        scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer, mode="min", factor=cfg.lr_factor, patience=cfg.lr_patience, min_lr=cfg.min_lr
        )
        rng = np.random.default_rng(cfg.seed)
        full_batch = cfg.batch_size >= xi.shape[0]

        history: List[float] = []
        best_loss, best_iteration, best_theta = math.inf, -1, theta0
        for it in range(cfg.iterations):
            theta = param.detach().numpy().copy()
            if full_batch:
                xb, yb = xi, y
            else:
                idx = rng.choice(xi.shape[0], cfg.batch_size, replace=False)
                xb, yb = xi[idx], y[idx]
            try:
                model, head = self._unpack(model_init, head_init, theta)
                loss, grad = self.loss_and_grad(model, head, xb, yb)
            except NonFiniteError as e:
                raise NonFiniteLoss(it) from e
            if not math.isfinite(loss):
                self.logger.error(f"Loss diverged at iteration {it}")
                raise NonFiniteLoss(it, loss)
            history.append(loss)
            if loss < best_loss:
                best_loss, best_iteration, best_theta = loss, it, theta

            param.grad = torch.from_numpy(grad)
            optimizer.step()
            lr_before = optimizer.param_groups[0]["lr"]
            scheduler.step(loss)
            lr_after = optimizer.param_groups[0]["lr"]
            if lr_after < lr_before:
                self.logger.info(f"Iteration {it}: learning rate reduced to {lr_after:.3e}")
            if cfg.log_every and it % cfg.log_every == 0:
                self.logger.info(f"Iteration {it}: loss {loss:.6e}")

        if cfg.iterations:
            final_theta = param.detach().numpy().copy()
            try:
                model, head = self._unpack(model_init, head_init, final_theta)
                final_loss, _ = self.loss_and_grad(model, head, xi, y, with_grad=False)
            except NonFiniteError:
                final_loss = math.nan
            if full_batch and math.isfinite(final_loss) and final_loss < best_loss:
                best_loss, best_iteration, best_theta = final_loss, cfg.iterations, final_theta
            if not full_batch:
                model, head = self._unpack(model_init, head_init, best_theta)
                best_loss, _ = self.loss_and_grad(model, head, xi, y, with_grad=False)
                if math.isfinite(final_loss) and final_loss < best_loss:
                    best_loss, best_iteration, best_theta = final_loss, cfg.iterations, final_theta

        model, head = self._unpack(model_init, head_init, best_theta)
        if not cfg.iterations:
            best_loss, _ = self.loss_and_grad(model, head, xi, y, with_grad=False)
        self.logger.info(f"Training finished: best loss {best_loss:.6e} at iteration {best_iteration}")
        return TrainResult(model, np.asarray(history), best_loss, best_iteration, head)


def train(model_init: HdnnModel, data: Tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
          head_init: Optional[OutputHead] = None) -> TrainResult:
    xi, y = data
    return Trainer(cfg).train(model_init, xi, y, head_init)


def sup_error(model: HdnnModel, target: TargetFunction, dom: BoxDomain,
              head: Optional[OutputHead] = None, cfg: FixedPointConfig = DEFAULT_FIXED_POINT) -> float:
    """max over the evaluation grid of ||phi(xi) - f(xi)||_inf."""
    grid = evaluation_grid(dom)
    out = restricted_flow(model, grid, cfg)
    if head is not None:
        out = head_apply(head, out)
    return float(np.max(np.abs(out - target(grid))))


def accuracy(model: HdnnModel, head: OutputHead, xi: np.ndarray, labels: np.ndarray,
             cfg: FixedPointConfig = DEFAULT_FIXED_POINT) -> float:
    scores = head_apply(head, restricted_flow(model, xi, cfg))
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))


# ------------------------------------------------------------------------------
# Depth sweep
# ------------------------------------------------------------------------------
def resolve_threads(env: Optional[Mapping[str, str]] = None) -> int:
    env = os.environ if env is None else env
    raw = env.get(THREADS_ENV)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        threads = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
    if threads < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
    return threads


def approximation_bound(n: int, cf: float, depth: int) -> float:
    """2^{n/2} C_f / sqrt(N)."""
    return 2.0 ** (n / 2.0) * cf / math.sqrt(depth)


@dataclass
class DepthRow:
    depth: int
    h: float
    sup_error: float
    bound: float
    final_loss: float
    seeds_used: int

    @property
    def within_bound(self) -> bool:
        return self.sup_error <= self.bound


@dataclass
class DepthSweepResult:
    rows: List[DepthRow]
    cf: float
    cf_source: str
    slope: float
    grid_points: int
    gaps: List[Tuple[int, int, str]] = field(default_factory=list)

    def non_increasing(self, slack: float = 0.2) -> bool:
        errors = [r.sup_error for r in self.rows]
        return all(b <= (1.0 + slack) * a for a, b in zip(errors, errors[1:]))


def fit_slope(depths: Sequence[int], errors: Sequence[float]) -> float:
    """Slope of log e_N against log N (nan with fewer than two usable points)."""
    pairs = [(d, e) for d, e in zip(depths, errors) if e > 0 and math.isfinite(e)]
    if len(pairs) < 2:
        return math.nan
    d, e = zip(*pairs)
    return float(np.polyfit(np.log(d), np.log(e), 1)[0])


class DepthSweep:
    """Trains fresh restricted models for every depth and seed and compares e_N with the bound."""

    def __init__(self, target: TargetFunction, dom: BoxDomain, activation: Activation,
                 depths: Sequence[int], config: TrainConfig, seeds: int = 3, samples: int = 256,
                 horizon: Optional[float] = None, use_quadrature: bool = True,
                 quadrature: QuadratureConfig = QuadratureConfig(), threads: Optional[int] = None):
        if not activation.is_sigmoidal:
            raise ValueError(f"The depth bound needs a sigmoidal activation, got '{activation.name}'")
        if target.n != dom.n:
            raise DimensionError(f"Target dimension {target.n} does not match domain dimension {dom.n}")
        self.logger = logging.getLogger(__name__)
        self.target = target
        self.dom = dom
        self.activation = activation
        self.depths = sorted(set(int(d) for d in depths))
        self.config = config
        self.seeds = seeds
        self.samples = samples
        self.horizon = horizon
        self.use_quadrature = use_quadrature
        self.quadrature = quadrature
        self.threads = threads or resolve_threads()

    def step_size(self, depth: int) -> float:
        return self.horizon / depth if self.horizon else self.config.h

    def spectral_constant(self) -> Tuple[float, str]:
        if self.use_quadrature and self.target.n <= 2:
            try:
                return estimate_cf(self.target, self.dom, self.quadrature).cf_estimate, "quadrature"
            except TruncationTooTight as e:
                self.logger.info(f"C_f quadrature unavailable for {self.target.name}: {str(e)}")
        if self.target.known_cf is not None:
            return self.target.known_cf, self.target.cf_provenance
        return math.nan, "unavailable"

    def _run_one(self, depth: int, seed: int, data: Tuple[np.ndarray, np.ndarray]):
        cfg = replace(self.config, depth=depth, h=self.step_size(depth), seed=seed,
                      structure=StructureTag.RESTRICTED)
        model = initialize_model(self.dom.n, depth, cfg.h, self.activation, cfg.structure, cfg.init_scale, seed)
        result = Trainer(cfg).train(model, *data)
        return result, sup_error(result.model, self.target, self.dom, cfg=cfg.fixed_point)

    def run(self) -> DepthSweepResult:
        cf, source = self.spectral_constant()
        data = sample_dataset(self.dom, self.target, self.samples, self.config.seed)
        jobs = [(d, self.config.seed + k) for d in self.depths for k in range(self.seeds)]
        self.logger.info(f"Depth sweep over {self.depths} with {self.seeds} seeds on {self.threads} threads")

        outcomes: Dict[Tuple[int, int], Tuple[TrainResult, float]] = {}
        gaps: List[Tuple[int, int, str]] = []
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            futures = {job: pool.submit(self._run_one, job[0], job[1], data) for job in jobs}
            for job, future in futures.items():
                try:
                    outcomes[job] = future.result()
                except (NonFiniteLoss, NoConvergence) as e:
                    self.logger.error(f"Depth {job[0]}, seed {job[1]} failed: {str(e)}")
                    gaps.append((job[0], job[1], str(e)))

        rows = []
        for depth in self.depths:
            runs = [outcomes[(depth, s)] for s in sorted(seed for d, seed in outcomes if d == depth)]
            if not runs:
                continue
            best, err = min(runs, key=lambda r: r[1])
            row = DepthRow(depth, self.step_size(depth), err,
                           approximation_bound(self.dom.n, cf, depth), best.best_loss, len(runs))
            self.logger.info(f"N={depth}: sup error {err:.4e}, bound {row.bound:.4e}")
            rows.append(row)

        slope = fit_slope([r.depth for r in rows], [r.sup_error for r in rows])
        return DepthSweepResult(rows, cf, source, slope, len(evaluation_grid(self.dom)), gaps)


def depth_sweep(target: TargetFunction, dom: BoxDomain, depths: Sequence[int], cfg: TrainConfig,
                activation: Activation, **kwargs) -> DepthSweepResult:
    return DepthSweep(target, dom, activation, depths, cfg, **kwargs).run()
