import math

import numpy as np
import pytest

from src.core.hamiltonian import (
    HdnnModel,
    LayerParams,
    SkewSymmetryError,
    StructureError,
    StructureTag,
    canonical_J,
    hamiltonian_gradient,
    hamiltonian_value,
    vector_field,
)
from src.core.numerics import TANH, DimensionError, is_skew_symmetric
from tests.builders import general_layer, random_model, restricted_layer


def _general(n, W=None, b=None, eta=None, J=None):
    m = 2 * n
    return LayerParams.general(
        np.zeros((m, m)) if J is None else J,
        np.zeros((m, m)) if W is None else W,
        np.zeros(m) if b is None else b,
        np.zeros(m) if eta is None else eta,
    )


class TestHamiltonianValue:
    def test_zero_weights(self):
        layer = _general(2)
        assert hamiltonian_value(layer, TANH, np.array([0.3, -1.0, 2.0, 0.5])) == 0.0

    def test_linear_term_only(self):
        layer = _general(1, eta=[1.0, 0.0])
        assert hamiltonian_value(layer, TANH, np.array([2.5, 0.0])) == 2.5

    def test_log_cosh_reference(self):
        layer = _general(1, W=np.eye(2))
        value = hamiltonian_value(layer, TANH, np.array([1.0, 0.0]))
        assert value == pytest.approx(math.log(math.cosh(1.0)), abs=1e-15)

    def test_batched_rows(self):
        layer = _general(1, W=np.eye(2))
        values = hamiltonian_value(layer, TANH, np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert values.shape == (2,)
        assert values[1] == 0.0

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            hamiltonian_value(_general(1), TANH, np.zeros(3))


class TestHamiltonianGradient:
    def test_constant_gradient(self):
        v = np.array([0.1, -0.2, 0.3, 0.4])
        np.testing.assert_array_equal(hamiltonian_gradient(_general(2, eta=v), TANH, np.ones(4)), v)

    def test_tanh_reference(self):
        grad = hamiltonian_gradient(_general(1, W=np.eye(2)), TANH, np.array([1.0, 0.0]))
        np.testing.assert_allclose(grad, [0.7615941559557649, 0.0], atol=1e-15)

    @pytest.mark.parametrize("n", [1, 2, 4, 8])
    def test_matches_finite_differences(self, n):
        rng = np.random.default_rng(n)
        m = 2 * n
        layer = _general(n, W=rng.uniform(-1, 1, (m, m)), b=rng.uniform(-1, 1, m), eta=rng.uniform(-1, 1, m))
        x = rng.uniform(-1, 1, m)
        step = 1e-5
        fd = np.array([
            (hamiltonian_value(layer, TANH, x + step * e) - hamiltonian_value(layer, TANH, x - step * e)) / (2 * step)
            for e in np.eye(m)
        ])
        grad = hamiltonian_gradient(layer, TANH, x)
        assert np.max(np.abs(grad - fd) / np.maximum(np.abs(grad), 1.0)) <= 1e-5


class TestVectorField:
    def test_zero_J(self):
        layer = _general(1, W=np.eye(2), eta=[1.0, 2.0])
        np.testing.assert_array_equal(vector_field(layer, TANH, np.array([0.5, 0.5])), [0.0, 0.0])

    def test_canonical_swap(self):
        g = np.array([1.0, 2.0, 3.0, 4.0])
        layer = _general(2, J=canonical_J(2), eta=g)
        np.testing.assert_array_equal(vector_field(layer, TANH, np.zeros(4)), [-3.0, -4.0, 1.0, 2.0])

    @pytest.mark.parametrize("n", [1, 3, 8])
    def test_instantaneous_energy_conservation(self, n):
        rng = np.random.default_rng(10 + n)
        layer = general_layer(n, rng, scale=1.0)
        for _ in range(10):
            x = rng.uniform(-1, 1, 2 * n)
            assert abs(vector_field(layer, TANH, x) @ hamiltonian_gradient(layer, TANH, x)) <= 1e-12

    def test_restricted_p_block_is_constant(self, rng):
        layer = restricted_layer(3, rng)
        expected = layer.free["X"].T @ layer.free["eta_tilde"]
        for _ in range(5):
            x = rng.uniform(-2, 2, 6)
            np.testing.assert_allclose(vector_field(layer, TANH, x)[:3], expected, atol=1e-14)


class TestLayerParams:
    def test_non_skew_J_rejected(self):
        with pytest.raises(SkewSymmetryError):
            _general(1, J=np.array([[0.0, 1.0], [1.0, 0.0]]))

    def test_structured_J_is_skew_for_any_X(self, rng):
        layer = restricted_layer(3, rng)
        assert not np.allclose(layer.free["X"], layer.free["X"].T)
        assert is_skew_symmetric(layer.J)

    def test_restricted_full_matrices(self):
        layer = LayerParams.restricted([[2.0]], [[3.0]], [0.5], [0.25])
        np.testing.assert_array_equal(layer.J, [[0.0, -2.0], [2.0, 0.0]])
        np.testing.assert_array_equal(layer.W, [[3.0, 0.0], [0.0, 0.0]])
        np.testing.assert_array_equal(layer.b, [0.5, 0.0])
        np.testing.assert_array_equal(layer.eta, [0.0, -0.25])

    def test_block_explicit_defaults(self):
        layer = LayerParams.block_explicit(np.eye(2), np.eye(2), 2 * np.eye(2))
        assert layer.structure is StructureTag.BLOCK_EXPLICIT
        np.testing.assert_array_equal(layer.W[2:, 2:], 2 * np.eye(2))
        np.testing.assert_array_equal(layer.eta, np.zeros(4))

    def test_missing_parameter(self):
        with pytest.raises(StructureError):
            LayerParams(StructureTag.RESTRICTED, 1, {"X": [[1.0]], "W_tilde": [[1.0]], "b_tilde": [0.0]})

    def test_parameters_are_read_only(self, rng):
        layer = restricted_layer(2, rng)
        with pytest.raises(ValueError):
            layer.free["X"][0, 0] = 1.0

    def test_as_general_keeps_matrices(self, rng):
        layer = restricted_layer(2, rng)
        general = layer.as_general()
        assert general.structure is StructureTag.GENERAL
        for name in ("J", "W", "b", "eta"):
            np.testing.assert_array_equal(getattr(general, name), getattr(layer, name))

    def test_parse_tag(self):
        assert StructureTag.parse("Restricted") is StructureTag.RESTRICTED
        with pytest.raises(StructureError):
            StructureTag.parse("leapfrog")


class TestHdnnModel:
    def test_free_vector_round_trip(self, rng):
        for structure in StructureTag:
            model = random_model(structure, 2, 3, 0.1, TANH, rng)
            theta = model.free_vector()
            assert len(model.free_labels()) == theta.size
            rebuilt = model.with_free_vector(theta)
            np.testing.assert_array_equal(rebuilt.free_vector(), theta)

    def test_layer_count_checked(self, rng):
        with pytest.raises(StructureError):
            HdnnModel(2, 3, 0.1, TANH, (restricted_layer(2, rng),), StructureTag.RESTRICTED)

    def test_tag_mismatch(self, rng):
        with pytest.raises(StructureError):
            HdnnModel(2, 1, 0.1, TANH, (restricted_layer(2, rng),), StructureTag.GENERAL)

    @pytest.mark.parametrize("h", [0.0, -0.1, float("inf")])
    def test_bad_step(self, rng, h):
        with pytest.raises(ValueError):
            HdnnModel(2, 1, h, TANH, (restricted_layer(2, rng),), StructureTag.RESTRICTED)

    def test_horizon(self, restricted_model):
        assert restricted_model.horizon == pytest.approx(2.0)
