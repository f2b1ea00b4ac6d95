import numpy as np
import pytest

from src.core.gradients import layer_jacobian
from src.core.hamiltonian import HdnnModel, LayerParams, StructureTag, canonical_J, vector_field
from src.core.integrator import (
    FixedPointConfig,
    NoConvergence,
    State,
    flow,
    forward_euler_step,
    gradient_flow_step,
    inject,
    project,
    restricted_flow,
    sie_step,
)
from src.core.numerics import TANH, DimensionError, NonFiniteError, det
from tests.builders import IDENTITY, block_layer, general_layer, random_model, restricted_layer

TANH_1_HALF = 0.38079707797788243


def _expansive_layer():
    # p+ -> p - 8 (p+ + q): slope -8, so plain iteration diverges
    return LayerParams.general(canonical_J(1), 2.0 * np.ones((2, 2)), np.zeros(2), np.zeros(2))


class TestSieStep:
    def test_zero_step_is_identity(self, rng):
        s = State(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2))
        for layer in (restricted_layer(2, rng), block_layer(2, rng), general_layer(2, rng)):
            out = sie_step(layer, TANH, 0.0, s)
            np.testing.assert_array_equal(out.p, s.p)
            np.testing.assert_array_equal(out.q, s.q)

    def test_scalar_restricted_example(self, scalar_restricted_layer_model):
        layer = scalar_restricted_layer_model.layers[0]
        out = sie_step(layer, TANH, 0.5, State([1.0], [0.0]))
        assert out.p[0] == 1.0
        assert out.q[0] == pytest.approx(TANH_1_HALF, abs=1e-16)

    @pytest.mark.parametrize("n", [1, 2, 4, 8])
    @pytest.mark.parametrize("h", [0.1, 0.5])
    def test_closed_forms_match_implicit_solve(self, n, h):
        rng = np.random.default_rng(100 * n + int(10 * h))
        s = State(rng.uniform(-1, 1, n), rng.uniform(-1, 1, n))
        for layer in (restricted_layer(n, rng), block_layer(n, rng)):
            explicit = sie_step(layer, TANH, h, s)
            implicit = sie_step(layer.as_general(), TANH, h, s)
            np.testing.assert_allclose(implicit.vector(), explicit.vector(), rtol=0, atol=1e-11)

    def test_general_residual_satisfied(self, rng):
        layer = general_layer(3, rng)
        h = 0.1
        s = State(rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3))
        out = sie_step(layer, TANH, h, s)
        mixed = np.concatenate([out.p, s.q])
        expected = s.vector() + h * vector_field(layer, TANH, mixed)
        np.testing.assert_allclose(out.vector(), expected, rtol=0, atol=1e-12)

    def test_batched_rows_match_single(self, rng):
        layer = general_layer(2, rng)
        p = rng.uniform(-1, 1, (5, 2))
        q = rng.uniform(-1, 1, (5, 2))
        batch = sie_step(layer, TANH, 0.1, State(p, q))
        for i in range(5):
            single = sie_step(layer, TANH, 0.1, State(p[i], q[i]))
            np.testing.assert_allclose(batch.p[i], single.p, atol=1e-13)
            np.testing.assert_allclose(batch.q[i], single.q, atol=1e-13)

    def test_no_convergence_raised(self):
        with pytest.raises(NoConvergence) as info:
            sie_step(_expansive_layer(), IDENTITY, 1.0, State([0.3], [0.1]), FixedPointConfig(max_iter=5))
        assert info.value.residual > 0
        assert info.value.layer is None

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            sie_step(restricted_layer(2, rng), TANH, 0.1, State([1.0], [0.0]))

    def test_non_finite_state_rejected(self):
        with pytest.raises(NonFiniteError):
            State([np.inf], [0.0])

    def test_fixed_point_config_validation(self):
        with pytest.raises(ValueError):
            FixedPointConfig(damping=0.0)
        with pytest.raises(ValueError):
            FixedPointConfig(tol=0.0)

    def test_h_squared_consistency(self, rng):
        layer = general_layer(2, rng)
        s = State(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2))

        def defect(h):
            out = sie_step(layer, TANH, h, s)
            return np.linalg.norm(out.vector() - s.vector() - h * vector_field(layer, TANH, s.vector()))

        ratio = defect(0.02) / defect(0.01)
        assert 3.0 < ratio < 5.0


class TestFlow:
    def test_depth_one_is_single_step(self, rng):
        model = random_model("block_explicit", 2, 1, 0.3, TANH, rng)
        s = State(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2))
        trajectory = flow(model, s)
        assert len(trajectory) == 2
        np.testing.assert_array_equal(trajectory[1].vector(), sie_step(model.layers[0], TANH, 0.3, s).vector())

    def test_zero_weights_constant(self):
        for structure in StructureTag:
            layers = tuple(LayerParams.zeros(structure, 2) for _ in range(5))
            model = HdnnModel(2, 5, 0.2, TANH, layers, structure)
            x0 = State([0.5, -0.5], [1.0, 2.0])
            for s in flow(model, x0):
                np.testing.assert_array_equal(s.vector(), x0.vector())

    def test_two_layer_hand_composition(self):
        layer = LayerParams.restricted([[1.0]], [[1.0]], [0.0], [0.0])
        model = HdnnModel(1, 2, 0.5, TANH, (layer, layer), StructureTag.RESTRICTED)
        trajectory = flow(model, inject([1.0]))
        assert trajectory[2].p[0] == 1.0
        assert trajectory[2].q[0] == pytest.approx(2 * TANH_1_HALF, abs=1e-15)

    def test_layer_index_attached(self):
        good = LayerParams.zeros(StructureTag.GENERAL, 1)
        model = HdnnModel(1, 2, 1.0, IDENTITY, (good, _expansive_layer()), StructureTag.GENERAL)
        with pytest.raises(NoConvergence) as info:
            flow(model, State([0.3], [0.1]), FixedPointConfig(max_iter=5))
        assert info.value.layer == 1


class TestRestrictedFlow:
    def test_inject_and_project(self):
        s = inject([1.0, 2.0])
        np.testing.assert_array_equal(s.p, [1.0, 2.0])
        np.testing.assert_array_equal(s.q, [0.0, 0.0])
        np.testing.assert_array_equal(project(s), [0.0, 0.0])
        np.testing.assert_array_equal(project(State([1.0], [7.0])), [7.0])

    def test_zero_model(self):
        layers = tuple(LayerParams.zeros(StructureTag.RESTRICTED, 3) for _ in range(4))
        model = HdnnModel(3, 4, 0.5, TANH, layers, StructureTag.RESTRICTED)
        np.testing.assert_array_equal(restricted_flow(model, [0.2, 0.4, -1.0]), np.zeros(3))

    def test_scalar_example(self, scalar_restricted_layer_model):
        assert restricted_flow(scalar_restricted_layer_model, [1.0])[0] == pytest.approx(TANH_1_HALF, abs=1e-16)

    def test_batch(self, restricted_model, rng):
        xi = rng.uniform(-1, 1, (7, 2))
        out = restricted_flow(restricted_model, xi)
        assert out.shape == (7, 2)
        np.testing.assert_allclose(out[3], restricted_flow(restricted_model, xi[3]), atol=1e-14)


class TestSymplecticity:
    def test_canonical_time_invariant_layer(self):
        rng = np.random.default_rng(7)
        Jc = canonical_J(2)
        for _ in range(50):
            W = rng.uniform(-1, 1, (4, 4))
            layer = LayerParams.general(Jc, W, rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4))
            s = State(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2))
            out = sie_step(layer, TANH, 0.1, s)
            M = layer_jacobian(layer, TANH, 0.1, s, out)
            assert np.max(np.abs(M.T @ Jc @ M - Jc)) <= 1e-7

    def test_finite_difference_jacobian_is_symplectic(self, rng):
        Jc = canonical_J(1)
        layer = LayerParams.general(Jc, rng.uniform(-1, 1, (2, 2)), rng.uniform(-1, 1, 2), np.zeros(2))
        x = rng.uniform(-1, 1, 2)
        step = 1e-6
        columns = []
        for e in np.eye(2):
            plus = sie_step(layer, TANH, 0.1, State.from_vector(x + step * e)).vector()
            minus = sie_step(layer, TANH, 0.1, State.from_vector(x - step * e)).vector()
            columns.append((plus - minus) / (2 * step))
        M = np.stack(columns, axis=1)
        assert np.max(np.abs(M.T @ Jc @ M - Jc)) <= 1e-7

    def test_structured_steps_have_unit_determinant(self, rng):
        for layer in (restricted_layer(3, rng), block_layer(3, rng)):
            s = State(rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3))
            M = layer_jacobian(layer, TANH, 0.5, s, sie_step(layer, TANH, 0.5, s))
            assert abs(det(M) - 1.0) <= 1e-9


class TestEulerBaselines:
    def test_zero_step_identity(self, rng):
        layer = general_layer(2, rng)
        s = State(rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2))
        np.testing.assert_array_equal(forward_euler_step(layer, TANH, 0.0, s).vector(), s.vector())
        np.testing.assert_array_equal(gradient_flow_step(layer, TANH, 0.0, s).vector(), s.vector())

    def test_zero_field_identity(self):
        layer = LayerParams.zeros(StructureTag.GENERAL, 1)
        s = State([0.3], [0.7])
        np.testing.assert_array_equal(forward_euler_step(layer, TANH, 0.5, s).vector(), s.vector())

    def test_linear_hamiltonian_by_hand(self):
        # H = eta . x, J = J_c: x+ = x + h (-eta_q, eta_p)
        layer = LayerParams.general(canonical_J(1), np.zeros((2, 2)), np.zeros(2), [2.0, 3.0])
        out = forward_euler_step(layer, TANH, 0.5, State([1.0], [1.0]))
        np.testing.assert_allclose(out.vector(), [1.0 - 1.5, 1.0 + 1.0])
        out = gradient_flow_step(layer, TANH, 0.5, State([1.0], [1.0]))
        np.testing.assert_allclose(out.vector(), [0.0, -0.5])
