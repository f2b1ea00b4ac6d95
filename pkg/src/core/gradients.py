# src/core/gradients.py

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .hamiltonian import HdnnModel, LayerParams, StructureTag, hamiltonian_hessian
from .integrator import (
    DEFAULT_FIXED_POINT,
    FixedPointConfig,
    State,
    flow,
    forward_euler_step,
    gradient_flow_step,
    inject,
)
from .numerics import Activation, DimensionError, det, svd_extremes

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12


class SingularImplicitJacobian(RuntimeError):
    """I - h J_p H_p is too ill-conditioned to differentiate through."""

    def __init__(self, condition: float):
        self.condition = float(condition)
        super().__init__(f"Implicit correction matrix is numerically singular (condition {self.condition:.3e})")


@dataclass
class BsmReport:
    """Layer Jacobians and the backward sensitivity products dx_N/dx_{N-j}, j = 1..N."""
    layer_jacobians: List[np.ndarray]
    bsm: Dict[int, np.ndarray]
    dets: List[float]
    sigma_extremes: List[Tuple[float, float]]

    def rows(self) -> List[Tuple[int, float, float, float]]:
        return [(j, d, smin, smax) for j, d, (smin, smax)
                in zip(sorted(self.bsm), self.dets, self.sigma_extremes)]

    def max_det_deviation(self) -> float:
        return max(abs(d - 1.0) for d in self.dets)


@dataclass
class ParamGrads:
    """Per-layer gradients laid out like LayerParams.free."""
    layers: List[Dict[str, np.ndarray]]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([g.ravel() for layer in self.layers for g in layer.values()])

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.as_vector()), initial=0.0))


# ------------------------------------------------------------------------------
# Layer Jacobians
# ------------------------------------------------------------------------------
def layer_jacobian(layer: LayerParams, act: Activation, h: float, s_in: State, s_out: State) -> np.ndarray:
    """d x_{j+1} / d x_j for one (unbatched) sample."""
    n = layer.n
    eye = np.eye(n)
    zero = np.zeros((n, n))
    f = layer.free

    if layer.structure is StructureTag.RESTRICTED:
        Wt = f["W_tilde"]
        A = h * f["X"] @ Wt.T
        d = act.sigma_prime(Wt @ s_out.p + f["b_tilde"])
        return np.block([[eye, zero], [A @ (d[:, None] * Wt), eye]])

    if layer.structure is StructureTag.BLOCK_EXPLICIT:
        X, Wp, Wq = f["X"], f["W_p"], f["W_q"]
        dq = act.sigma_prime(Wq @ s_in.q + f["b_q"])
        dp = act.sigma_prime(Wp @ s_out.p + f["b_p"])
        shear_p = np.block([[eye, -h * X.T @ Wq.T @ (dq[:, None] * Wq)], [zero, eye]])
        shear_q = np.block([[eye, zero], [h * X @ Wp.T @ (dp[:, None] * Wp), eye]])
        return shear_q @ shear_p

    Jp, Jq = layer.J[:n], layer.J[n:]
    H = hamiltonian_hessian(layer, act, np.concatenate([s_out.p, s_in.q]))
    Hp, Hq = H[:, :n], H[:, n:]
    K = eye - h * Jp @ Hp
    cond = np.linalg.cond(K)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularImplicitJacobian(cond)
    dpp = np.linalg.solve(K, eye)
    dpq = np.linalg.solve(K, h * Jp @ Hq)
    dqp = h * Jq @ Hp @ dpp
    dqq = eye + h * Jq @ Hq + h * Jq @ Hp @ dpq
    return np.block([[dpp, dpq], [dqp, dqq]])


def euler_jacobian(layer: LayerParams, act: Activation, h: float, s: State, dissipative: bool = False) -> np.ndarray:
    """Jacobian of forward_euler_step (or gradient_flow_step when dissipative)."""
    H = hamiltonian_hessian(layer, act, s.vector())
    field_jac = -H if dissipative else layer.J @ H
    return np.eye(2 * layer.n) + h * field_jac


def _products(jacobians: List[np.ndarray]) -> BsmReport:
    N = len(jacobians)
    products: Dict[int, np.ndarray] = {}
    dets: List[float] = []
    extremes: List[Tuple[float, float]] = []
    running = None
    for j in range(1, N + 1):
        factor = jacobians[N - j]
        running = factor.copy() if running is None else running @ factor
        products[j] = running
        dets.append(det(running))
        extremes.append(svd_extremes(running))
    return BsmReport(list(jacobians), products, dets, extremes)


def bsm(model: HdnnModel, trajectory: Sequence[State]) -> BsmReport:
    """Backward sensitivity matrices along a single-sample trajectory."""
    if len(trajectory) != model.depth + 1:
        raise DimensionError(f"Trajectory has {len(trajectory)} states, expected {model.depth + 1}")
    if trajectory[0].p.ndim != 1:
        raise DimensionError("bsm expects an unbatched trajectory")
    jacobians = [
        layer_jacobian(layer, model.activation, model.h, trajectory[j], trajectory[j + 1])
        for j, layer in enumerate(model.layers)
    ]
    return _products(jacobians)


def baseline_bsm(model: HdnnModel, x0: State, dissipative: bool = True) -> BsmReport:
    """Backward sensitivities of the explicit forward-Euler network with the same weights."""
    step = gradient_flow_step if dissipative else forward_euler_step
    s = x0
    jacobians = []
    for layer in model.layers:
        jacobians.append(euler_jacobian(layer, model.activation, model.h, s, dissipative))
        s = step(layer, model.activation, model.h, s)
    return _products(jacobians)


# ------------------------------------------------------------------------------
# Reverse mode
# ------------------------------------------------------------------------------
def _rows(a: np.ndarray) -> np.ndarray:
    return a if a.ndim == 2 else a[None, :]


def _vjp_restricted(layer, act, h, s_in, s_out, a_p, a_q):
    f = layer.free
    X, Wt = f["X"], f["W_tilde"]
    p_next = _rows(s_out.p)
    z = p_next @ Wt.T + f["b_tilde"]
    s = act.sigma(z)
    u = s @ Wt

    g_X = h * a_q.T @ u
    a_u = h * a_q @ X
    g_Wt = s.T @ a_u
    a_z = (a_u @ Wt.T) * act.sigma_prime(z)
    g_Wt += a_z.T @ p_next
    g_b = a_z.sum(axis=0)
    a_pn = a_p + a_z @ Wt

    a_c = h * a_pn.sum(axis=0)
    g_X += np.outer(f["eta_tilde"], a_c)
    g_eta = X @ a_c
    return a_pn, a_q, {"X": g_X, "W_tilde": g_Wt, "b_tilde": g_b, "eta_tilde": g_eta}


def _vjp_block(layer, act, h, s_in, s_out, a_p, a_q):
    f = layer.free
    X, Wp, Wq = f["X"], f["W_p"], f["W_q"]
    q = _rows(s_in.q)
    p_next = _rows(s_out.p)

    z_q = q @ Wq.T + f["b_q"]
    s_q = act.sigma(z_q)
    v = s_q @ Wq + f["eta_q"]
    z_p = p_next @ Wp.T + f["b_p"]
    s_p = act.sigma(z_p)
    w = s_p @ Wp + f["eta_p"]

    # q+ = q + h X w
    g_X = h * a_q.T @ w
    a_w = h * a_q @ X
    g_eta_p = a_w.sum(axis=0)
    g_Wp = s_p.T @ a_w
    a_zp = (a_w @ Wp.T) * act.sigma_prime(z_p)
    g_Wp += a_zp.T @ p_next
    g_bp = a_zp.sum(axis=0)
    a_pn = a_p + a_zp @ Wp

    # p+ = p - h X^T v
    g_X += -h * v.T @ a_pn
    a_v = -h * a_pn @ X.T
    g_eta_q = a_v.sum(axis=0)
    g_Wq = s_q.T @ a_v
    a_zq = (a_v @ Wq.T) * act.sigma_prime(z_q)
    g_Wq += a_zq.T @ q
    g_bq = a_zq.sum(axis=0)
    a_q_in = a_q + a_zq @ Wq

    return a_pn, a_q_in, {
        "X": g_X, "W_p": g_Wp, "W_q": g_Wq,
        "b_p": g_bp, "b_q": g_bq, "eta_p": g_eta_p, "eta_q": g_eta_q,
    }


def _grad_field_vjp(layer, act, z, a_g):
    """Pull a cotangent on g(z) = W^T sigma(W z + b) + eta back to z and (W, b, eta)."""
    W = layer.W
    y = z @ W.T + layer.b
    s = act.sigma(y)
    g_W = s.T @ a_g
    a_y = (a_g @ W.T) * act.sigma_prime(y)
    g_W += a_y.T @ z
    return a_y @ W, {"W": g_W, "b": a_y.sum(axis=0), "eta": a_g.sum(axis=0)}


def _vjp_general(layer, act, h, s_in, s_out, a_p, a_q):
    n = layer.n
    J, W = layer.J, layer.W
    Jp = J[:n]
    q = _rows(s_in.q)
    z = np.concatenate([_rows(s_out.p), q], axis=1)
    y = z @ W.T + layer.b
    g = act.sigma(y) @ W + layer.eta
    a = np.concatenate([a_p, a_q], axis=1)

    # x+ = x + h J g(z): direct path
    g_J = h * a.T @ g
    a_z, grads = _grad_field_vjp(layer, act, z, h * a @ J)

    # z_p = p+ is implicit: K^T mu = a_z[:, :n], K = I - h Jp Hp
    d = act.sigma_prime(y)
    hessians = np.einsum("ki,bk,kj->bij", W, d, W)
    K = np.eye(n) - h * np.einsum("ik,bkj->bij", Jp, hessians[:, :, :n])
    cond = np.linalg.cond(K)
    if not np.all(np.isfinite(cond)) or np.max(cond) > CONDITION_LIMIT:
        raise SingularImplicitJacobian(float(np.max(cond)))
    mu = np.linalg.solve(np.swapaxes(K, 1, 2), a_z[:, :n, None])[:, :, 0]

    g_J[:n] += h * mu.T @ g
    a_z2, grads2 = _grad_field_vjp(layer, act, z, h * mu @ Jp)
    for name in grads:
        grads[name] = grads[name] + grads2[name]

    a_p_in = a_p + mu
    a_q_in = a_q + a_z[:, n:] + a_z2[:, n:]
    lower = np.tril_indices(2 * n, -1)
    grads["J_lower"] = g_J[lower] - g_J.T[lower]
    return a_p_in, a_q_in, {name: grads[name] for name in ("J_lower", "W", "b", "eta")}


_VJP = {
    StructureTag.RESTRICTED: _vjp_restricted,
    StructureTag.BLOCK_EXPLICIT: _vjp_block,
    StructureTag.GENERAL: _vjp_general,
}


def backprop_trajectory(model: HdnnModel, trajectory: Sequence[State], a_qN: np.ndarray,
                        a_pN: Optional[np.ndarray] = None) -> Tuple[ParamGrads, np.ndarray]:
    """Reverse sweep over a (batched) trajectory.

    Returns the summed parameter gradients and the cotangent of the initial p.
    """
    a_q = _rows(np.asarray(a_qN, dtype=np.float64))
    a_p = np.zeros_like(a_q) if a_pN is None else _rows(np.asarray(a_pN, dtype=np.float64))
    layer_grads: List[Dict[str, np.ndarray]] = [None] * model.depth
    vjp = _VJP[model.structure]
    for j in range(model.depth - 1, -1, -1):
        a_p, a_q, layer_grads[j] = vjp(model.layers[j], model.activation, model.h,
                                       trajectory[j], trajectory[j + 1], a_p, a_q)
    return ParamGrads(layer_grads), a_p


def backprop(model: HdnnModel, xi_batch: np.ndarray,
             loss_grad_at_qN: Union[np.ndarray, Callable[[np.ndarray], np.ndarray]],
             cfg: FixedPointConfig = DEFAULT_FIXED_POINT) -> ParamGrads:
    """Batch-averaged gradients of a per-sample loss l(q_N(xi)).

    loss_grad_at_qN is either the per-sample gradient dl/dq_N (shape (B, n)) or a
    callable mapping q_N to it.
    """
    xi = _rows(np.asarray(xi_batch, dtype=np.float64))
    if xi.shape[1] != model.n:
        raise DimensionError(f"Expected inputs of dimension {model.n}, got {xi.shape[1]}")
    trajectory = flow(model, inject(xi), cfg)
    a_q = loss_grad_at_qN(trajectory[-1].q) if callable(loss_grad_at_qN) else loss_grad_at_qN
    a_q = _rows(np.asarray(a_q, dtype=np.float64))
    if a_q.shape != xi.shape:
        raise DimensionError(f"Loss gradient has shape {a_q.shape}, expected {xi.shape}")
    grads, _ = backprop_trajectory(model, trajectory, a_q)
    batch = xi.shape[0]
    return ParamGrads([{k: v / batch for k, v in layer.items()} for layer in grads.layers])


# ------------------------------------------------------------------------------
# Finite-difference oracle
# ------------------------------------------------------------------------------
def preactivations(model: HdnnModel, trajectory: Sequence[State]) -> np.ndarray:
    """Every argument passed to sigma along a trajectory, flattened."""
    parts = []
    for j, layer in enumerate(model.layers):
        s_in, s_out = trajectory[j], trajectory[j + 1]
        f = layer.free
        if layer.structure is StructureTag.RESTRICTED:
            parts.append(s_out.p @ f["W_tilde"].T + f["b_tilde"])
        elif layer.structure is StructureTag.BLOCK_EXPLICIT:
            parts.append(s_in.q @ f["W_q"].T + f["b_q"])
            parts.append(s_out.p @ f["W_p"].T + f["b_p"])
        else:
            z = np.concatenate([s_out.p, s_in.q], axis=-1)
            parts.append(z @ layer.W.T + layer.b)
    return np.concatenate([np.ravel(p) for p in parts])


@dataclass
class FdCheckRow:
    index: int
    label: Tuple[int, str, int]
    analytic: float
    fd: float
    rel_err: float


@dataclass
class FdCheckReport:
    rows: List[FdCheckRow]
    excluded: List[int] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((r.rel_err for r in self.rows), default=0.0)

    @property
    def worst(self) -> Optional[FdCheckRow]:
        return max(self.rows, key=lambda r: r.rel_err, default=None)


def fd_tolerance(act: Activation) -> float:
    return 1e-3 if act.kinks else 1e-5


def fd_check(model: HdnnModel, xi: np.ndarray, seed: int = 0, step: float = 1e-5,
             stencil: str = "central", max_params: int = 200, kink_threshold: float = 1e-4,
             scale_floor: float = 1e-4, cfg: FixedPointConfig = DEFAULT_FIXED_POINT) -> FdCheckReport:
    """Compare backprop against finite differences of L = mean 1/2 ||q_N - c||^2.

    c is a random target drawn from seed. Every free scalar is checked, or a
    seeded subsample of max_params of them. For activations with kinks, a
    coordinate is excluded when its perturbation moves some pre-activation of
    some sample across a kink or to within kink_threshold of one. Pre-activations
    the perturbation leaves unchanged never exclude it.
    """
    xi = _rows(np.asarray(xi, dtype=np.float64))
    rng = np.random.default_rng(seed)
    target = rng.uniform(-1.0, 1.0, size=xi.shape)

    def loss(m: HdnnModel) -> float:
        qN = flow(m, inject(xi), cfg)[-1].q
        return float(0.5 * np.mean(np.sum((qN - target) ** 2, axis=1)))

    analytic = backprop(model, xi, lambda qN: qN - target, cfg).as_vector()
    theta = model.free_vector()
    labels = model.free_labels()
    count = theta.size
    indices = np.arange(count) if count <= max_params else np.sort(rng.choice(count, max_params, replace=False))

    if stencil == "central":
        offsets, weights = (1.0, -1.0), (0.5, -0.5)
    elif stencil == "five_point":
        offsets, weights = (2.0, 1.0, -1.0, -2.0), (-1.0 / 12.0, 8.0 / 12.0, -8.0 / 12.0, 1.0 / 12.0)
    else:
        raise ValueError(f"Unknown stencil '{stencil}'")

    kinks = np.asarray(model.activation.kinks, dtype=np.float64)
    base_pre = base_side = None
    if kinks.size:
        base_pre = preactivations(model, flow(model, inject(xi), cfg))
        base_side = np.sign(base_pre[:, None] - kinks[None, :])

    report = FdCheckReport(rows=[])
    for k in indices:
        total = 0.0
        near_kink = False
        for off, w in zip(offsets, weights):
            shifted = theta.copy()
            shifted[k] += off * step
            m = model.with_free_vector(shifted)
            if kinks.size:
                pre = preactivations(m, flow(m, inject(xi), cfg))
                moved = pre != base_pre
                dist = pre[moved, None] - kinks[None, :]
                if np.any(np.abs(dist) < kink_threshold) or np.any(np.sign(dist) != base_side[moved]):
                    near_kink = True
                    break
            total += w * loss(m)
        if near_kink:
            report.excluded.append(int(k))
            continue
        fd = total / step
        a = float(analytic[k])
        rel = abs(a - fd) / max(abs(a), abs(fd), scale_floor)
        report.rows.append(FdCheckRow(int(k), labels[k], a, fd, rel))

    if report.excluded:
        logger.info(f"Finite-difference check skipped {len(report.excluded)} kink-adjacent coordinates")
    return report
