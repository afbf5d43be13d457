"""
Tests for the autodiff core: primitives, backward, Jacobian columns, Adam, checkpoints

Copyright (c) 2026 flow-drl authors
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from flow_drl.core import diffcore as dc
from flow_drl.core.diffcore import (
    AdamState,
    CheckpointError,
    CompGraph,
    DomainError,
    Node,
    NonFiniteError,
    ParamSet,
    ShapeError,
    adam_step,
)
from flow_drl.core.layers import dense, init_dense, init_mlp, mlp
from flow_drl.oracles import gradient_error, primitive_cases


class TestPrimitives:
    """Forward values and error handling of the closed op set."""

    def test_relu_negative(self):
        """relu(-1) is 0."""
        assert float(dc.relu(np.array(-1.0))) == 0.0

    def test_tanh_at_origin(self):
        """tanh(0) = 0 with local derivative 1."""
        graph = CompGraph()
        x = graph.variable(np.array(0.0))
        y = dc.tanh(x)
        assert float(y.value) == 0.0
        assert float(graph.backward(y).of(x)) == 1.0

    def test_eager_ops_return_arrays(self):
        """Ops on plain arrays compute eagerly and record nothing."""
        out = dc.add(np.ones(3), np.ones(3))
        assert isinstance(out, np.ndarray)
        np.testing.assert_array_equal(out, np.full(3, 2.0))

    def test_ops_on_nodes_record(self):
        """Any Node operand records the op on that graph."""
        graph = CompGraph()
        x = graph.variable(np.ones(3))
        out = dc.mul(x, np.full(3, 2.0))
        assert isinstance(out, Node)
        assert out.op.name == "mul"
        assert len(graph) == 3

    def test_shape_mismatch_names_both_shapes(self):
        """Mismatched shapes raise ShapeError naming both."""
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            dc.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_no_implicit_broadcasting(self):
        """Only bare scalars are expanded; other shapes must match exactly."""
        with pytest.raises(ShapeError):
            dc.mul(np.ones((2, 3)), np.ones(3))
        np.testing.assert_array_equal(dc.mul(np.ones((2, 3)), 3.0), np.full((2, 3), 3.0))

    def test_log_of_non_positive(self):
        """log of a non-positive value is a hard error."""
        with pytest.raises(DomainError):
            dc.log(np.array([1.0, 0.0]))
        with pytest.raises(DomainError):
            dc.log(np.array([-2.0]))

    def test_matmul_inner_dims(self):
        """matmul rejects mismatched inner dimensions."""
        with pytest.raises(ShapeError, match="inner dims"):
            dc.matmul(np.ones((3, 4)), np.ones((3, 2)))

    def test_slice_out_of_range(self):
        """Slices outside the axis extent are rejected."""
        with pytest.raises(DomainError):
            dc.slice_(np.ones((2, 3)), 1, 2, 5)

    def test_softmax_rows_sum_to_one(self):
        """Softmax normalizes over the last axis."""
        out = dc.softmax(np.array([[1.0, 2.0, 3.0], [-1e9, 0.0, 0.0]]))
        np.testing.assert_allclose(out.sum(axis=-1), 1.0)
        assert out[1, 0] == 0.0

    def test_swapaxes_matches_numpy(self):
        """swapaxes exchanges any two axes; negative axes are accepted."""
        x = np.arange(24.0).reshape(2, 3, 4)
        np.testing.assert_array_equal(dc.swapaxes(x, 0, -1), np.swapaxes(x, 0, 2))
        node = CompGraph().variable(x)
        assert dc.swapaxes(node, 1, 2).shape == (2, 4, 3)
        with pytest.raises(DomainError):
            dc.swapaxes(x, 0, 3)

    def test_clip_and_maximum(self):
        """clip composes minimum and maximum."""
        out = dc.clip(np.array([-30.0, 0.5, 7.0]), -20.0, 2.0)
        np.testing.assert_array_equal(out, [-20.0, 0.5, 2.0])

    def test_reflected_operators(self):
        """ndarray (op) Node defers to the Node overloads."""
        graph = CompGraph()
        x = graph.variable(np.ones(3))
        y = np.full(3, 2.0) * x + 1.0
        assert isinstance(y, Node)
        np.testing.assert_array_equal(y.value, np.full(3, 3.0))
        m = graph.variable(np.ones((2, 3)))
        z = -(m @ np.ones((3, 1)))
        assert isinstance(z, Node)
        np.testing.assert_array_equal(z.value, np.full((2, 1), -3.0))

    def test_operands_from_different_graphs(self):
        """Mixing nodes of two graphs is an error."""
        a = CompGraph().variable(np.ones(2))
        b = CompGraph().variable(np.ones(2))
        with pytest.raises(ValueError):
            dc.add(a, b)

    def test_every_primitive_registered(self):
        """The registry covers the full op set."""
        expected = {
            "add", "sub", "mul", "matmul", "relu", "tanh", "exp", "log", "square", "sum",
            "mean", "broadcast", "concat", "slice", "softmax", "scale", "minimum", "abs",
            "transpose", "swapaxes", "reshape",
        }  # fmt: skip
        assert expected <= set(dc.PRIMITIVES)


class TestBackward:
    """Reverse pass into parameters and variables."""

    def test_sum_gradient_is_ones(self):
        """loss = sum(p) gives an all-ones gradient."""
        params = ParamSet("p")
        params.add("w", np.arange(6.0).reshape(2, 3))
        graph = CompGraph()
        graph.backward(dc.sum(graph.parameter(params, "w")))
        np.testing.assert_array_equal(params["w"].grad, np.ones((2, 3)))

    def test_module_backward_accumulates(self):
        """The module-level backward adds onto gradients already stored."""
        params = ParamSet("p")
        params.add("w", [1.0, -2.0])
        for _ in range(2):
            graph = CompGraph()
            dc.backward(graph, dc.sum(dc.scale(graph.parameter(params, "w"), 3.0)))
        np.testing.assert_array_equal(params["w"].grad, [6.0, 6.0])

    def test_mean_square_gradient(self):
        """loss = mean(square(p)) at p = [1, 2] gives [1, 2]."""
        params = ParamSet("p")
        params.add("w", [1.0, 2.0])
        graph = CompGraph()
        graph.backward(dc.mean(dc.square(graph.parameter(params, "w"))))
        np.testing.assert_allclose(params["w"].grad, [1.0, 2.0])

    def test_disconnected_gradient_is_zero(self):
        """A loss with no path to p leaves p's gradient at zero."""
        params = ParamSet("p")
        params.add("w", np.ones(3))
        graph = CompGraph()
        graph.parameter(params, "w")
        other = graph.variable(np.ones(3))
        graph.backward(dc.sum(other))
        np.testing.assert_array_equal(params["w"].grad, np.zeros(3))

    def test_non_scalar_loss(self):
        """backward needs a scalar."""
        graph = CompGraph()
        x = graph.variable(np.ones(3))
        with pytest.raises(ShapeError):
            graph.backward(dc.square(x))

    def test_gradients_accumulate(self):
        """Two backward passes add up until zero_grads."""
        params = ParamSet("p")
        params.add("w", np.ones(2))
        for _ in range(2):
            graph = CompGraph()
            graph.backward(dc.sum(graph.parameter(params, "w")))
        np.testing.assert_array_equal(params["w"].grad, np.full(2, 2.0))
        params.zero_grads()
        np.testing.assert_array_equal(params["w"].grad, np.zeros(2))

    def test_shared_binding(self):
        """Binding the same entry twice in one graph returns one node."""
        params = ParamSet("p")
        params.add("w", np.ones(2))
        graph = CompGraph()
        a = graph.parameter(params, "w")
        b = graph.parameter(params, "w")
        assert a is b
        graph.backward(dc.sum(dc.add(a, b)))
        np.testing.assert_array_equal(params["w"].grad, np.full(2, 2.0))

    def test_non_trainable_binding_is_constant(self):
        """Gradient-stopped parameters receive nothing."""
        params = ParamSet("p")
        params.add("w", np.ones(2))
        graph = CompGraph()
        x = graph.variable(np.ones(2))
        w = graph.parameter(params, "w", trainable=False)
        grads = graph.backward(dc.sum(dc.mul(x, w)))
        np.testing.assert_array_equal(params["w"].grad, np.zeros(2))
        np.testing.assert_array_equal(grads.of(x), np.ones(2))

    def test_backward_is_deterministic(self, rng):
        """Identical graphs give bit-identical gradients."""
        x0 = rng.standard_normal((4, 5))
        w0 = rng.standard_normal((5, 3))

        def grad():
            graph = CompGraph()
            x = graph.variable(x0)
            out = dc.softmax(dc.tanh(dc.matmul(x, w0)))
            return graph.backward(dc.sum(dc.square(out))).of(x)

        assert np.array_equal(grad(), grad())

    def test_forward_replay(self, rng):
        """Running forward twice on the same inputs is bit-identical."""
        params = ParamSet("net")
        init_mlp(params, "mlp", [3, 8, 8, 2], rng)
        x = rng.standard_normal((5, 3))
        assert np.array_equal(mlp(x, params.values(), "mlp", 3), mlp(x, params.values(), "mlp", 3))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-100.0, 100.0)))
    def test_sum_gradient_any_shape(self, value):
        """d sum(p)/dp is all ones for any shape."""
        graph = CompGraph()
        x = graph.variable(value)
        np.testing.assert_array_equal(graph.backward(dc.sum(x)).of(x), np.ones(value.shape))


class TestFiniteDifferences:
    """Analytic gradients against central differences."""

    def test_matmul_matches_finite_differences(self, rng):
        """3x4 by 4x2 matmul within 1e-4 relative."""
        fn, inputs = primitive_cases(rng)["matmul"]
        assert gradient_error(fn, inputs) < 1e-4

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_all_primitives(self, seed):
        """Every primitive within 1e-4 relative on a few seeds."""
        for name, (fn, inputs) in primitive_cases(np.random.default_rng(seed)).items():
            assert gradient_error(fn, inputs) < 1e-4, name


class TestJacobianColumn:
    """Jacobian columns by seeded backward passes."""

    def test_identity(self):
        """output = input gives e_j."""
        graph = CompGraph()
        x = graph.variable(np.array([[0.3, -1.0, 2.0]]))
        for j in range(3):
            col = graph.jacobian_column(x, x, j)
            np.testing.assert_array_equal(col.value, np.eye(3)[j][None, :])

    def test_constant_scale(self):
        """output = 2 * input in R^3, j=1 gives (0, 2, 0)."""
        graph = CompGraph()
        x = graph.variable(np.array([[1.0, 2.0, 3.0]]))
        col = dc.jacobian_column(graph, dc.scale(x, 2.0), x, 1)
        np.testing.assert_array_equal(col.value, [[0.0, 2.0, 0.0]])

    def test_tanh_layer_matches_finite_differences(self, rng):
        """Columns of tanh(W x) match central differences within 1e-4."""
        w = 0.5 * rng.standard_normal((3, 3))
        x0 = rng.standard_normal((1, 3))
        graph = CompGraph()
        x = graph.variable(x0)
        out = dc.tanh(dc.matmul(x, w.T))
        h = 1e-5
        for j in range(3):
            col = graph.jacobian_column(out, x, j).value[0]
            numeric = np.zeros(3)
            for k in range(3):
                step = np.zeros((1, 3))
                step[0, k] = h
                plus = np.tanh((x0 + step) @ w.T)[0, j]
                minus = np.tanh((x0 - step) @ w.T)[0, j]
                numeric[k] = (plus - minus) / (2 * h)
            scale = max(np.max(np.abs(numeric)), 1e-8)
            assert np.max(np.abs(col - numeric)) / scale < 1e-4

    def test_batched_rows_are_independent(self):
        """Each batch row holds the derivative of its own output row."""
        graph = CompGraph()
        x = graph.variable(np.array([[1.0, 2.0], [3.0, 4.0]]))
        col = graph.jacobian_column(dc.square(x), x, 0)
        np.testing.assert_array_equal(col.value, [[2.0, 0.0], [6.0, 0.0]])

    def test_column_is_differentiable(self):
        """A Jacobian column is a graph node that backward can traverse."""
        graph = CompGraph()
        x = graph.variable(np.array([[1.0, 2.0, 3.0]]))
        col = graph.jacobian_column(dc.square(x), x, 1)
        grads = graph.backward(dc.sum(col))
        np.testing.assert_array_equal(grads.of(x), [[0.0, 2.0, 0.0]])

    def test_index_out_of_range(self):
        """j outside the output width is a hard error."""
        graph = CompGraph()
        x = graph.variable(np.ones((1, 3)))
        with pytest.raises(DomainError):
            graph.jacobian_column(x, x, 3)


class TestParamSet:
    """Named parameter storage."""

    def test_duplicate_name(self):
        """Names are unique."""
        params = ParamSet("p")
        params.add("w", np.ones(2))
        with pytest.raises(ValueError, match="duplicate"):
            params.add("w", np.ones(2))

    def test_grad_matches_value_shape(self):
        """Gradient storage mirrors every value."""
        params = ParamSet("p")
        params.add("w", np.ones((2, 3)))
        params.add("b", np.ones(3))
        for entry in params:
            assert entry.grad.shape == entry.value.shape
        assert params.num_values() == 9

    def test_copy_is_independent(self):
        """copy() clones values."""
        params = ParamSet("p")
        params.add("w", np.ones(2))
        clone = params.copy("q")
        clone["w"].value[0] = 5.0
        assert params["w"].value[0] == 1.0
        assert clone.name == "q"

    def test_assign_checks_names(self):
        """assign() refuses a ParamSet with different entries."""
        a = ParamSet("a")
        a.add("w", np.ones(2))
        b = ParamSet("b")
        b.add("v", np.ones(2))
        with pytest.raises(ValueError):
            a.assign(b)

    def test_missing_name(self):
        """Unknown names raise KeyError naming the set."""
        with pytest.raises(KeyError, match="no parameter"):
            ParamSet("p")["nope"]


class TestAdam:
    """Bias-corrected Adam."""

    def test_zero_gradients_fresh_state(self, rng):
        """All-zero gradients leave parameters bit-identical."""
        params = ParamSet("p")
        params.add("w", rng.standard_normal((3, 2)))
        before = params["w"].value.copy()
        state = AdamState.for_params(params)
        adam_step(params, state)
        assert np.array_equal(params["w"].value, before)
        assert state.t == 1

    def test_first_step(self):
        """p=0, grad=1, lr=0.1 gives p close to -0.1 after one step."""
        params = ParamSet("p")
        params.add("w", np.array(0.0))
        params["w"].grad = np.array(1.0)
        adam_step(params, AdamState.for_params(params, lr=0.1))
        assert abs(float(params["w"].value) + 0.1) < 1e-7

    def test_constant_gradient_moves_monotonically(self):
        """Two steps with a constant gradient move p against it both times."""
        params = ParamSet("p")
        params.add("w", np.array(0.0))
        state = AdamState.for_params(params, lr=0.01)
        values = [0.0]
        for _ in range(2):
            params["w"].grad = np.array(1.0)
            adam_step(params, state)
            values.append(float(params["w"].value))
        assert values[0] > values[1] > values[2]

    def test_non_finite_gradient(self):
        """A NaN gradient fails loudly, names the parameter, and updates nothing."""
        params = ParamSet("actor")
        params.add("head.w", np.ones(2))
        params["head.w"].grad = np.array([np.nan, 0.0])
        state = AdamState.for_params(params)
        with pytest.raises(NonFiniteError, match="head.w") as excinfo:
            adam_step(params, state)
        assert excinfo.value.payload["parameter"] == "head.w"
        np.testing.assert_array_equal(params["head.w"].value, np.ones(2))
        assert state.t == 0

    def test_rebinding_keeps_old_graph_values(self):
        """An update does not mutate arrays captured by an earlier graph."""
        params = ParamSet("p")
        params.add("w", np.ones(2))
        graph = CompGraph()
        node = graph.parameter(params, "w")
        params["w"].grad = np.ones(2)
        adam_step(params, AdamState.for_params(params, lr=0.1))
        np.testing.assert_array_equal(node.value, np.ones(2))


class TestCheckpointContainer:
    """The versioned fp64 checkpoint format."""

    def _entries(self, rng):
        return {"actor/w": rng.standard_normal((2, 3)), "temperature/log_alpha": np.array(0.5)}

    def test_save_and_load(self, rng, temp_dir):
        """Saved entries load back with identical names, shapes and values."""
        entries = self._entries(rng)
        path = dc.save_checkpoint(temp_dir / "ckpt" / "step.ckpt", entries)
        loaded = dc.load_checkpoint(path)
        assert list(loaded) == list(entries)
        for name, value in entries.items():
            assert loaded[name].shape == value.shape
            assert np.array_equal(loaded[name], value)
        assert not (temp_dir / "ckpt" / "step.ckpt.tmp").exists()

    def test_byte_stable(self, rng):
        """Identical parameters encode to identical bytes."""
        entries = self._entries(rng)
        assert dc.encode_checkpoint(entries) == dc.encode_checkpoint(dict(entries))

    def test_bad_magic(self):
        """Foreign files are rejected."""
        with pytest.raises(CheckpointError, match="magic"):
            dc.decode_checkpoint(b"NOTACKPT" + b"\x00" * 16)

    def test_truncated(self, rng):
        """A cut-off file is rejected cleanly."""
        blob = dc.encode_checkpoint(self._entries(rng))
        with pytest.raises(CheckpointError):
            dc.decode_checkpoint(blob[:-4])

    def test_trailing_bytes(self, rng):
        """Extra bytes after the last entry are rejected."""
        blob = dc.encode_checkpoint(self._entries(rng))
        with pytest.raises(CheckpointError, match="trailing"):
            dc.decode_checkpoint(blob + b"\x00")

    def test_unsupported_version(self, rng):
        """Only version 1 is understood."""
        blob = bytearray(dc.encode_checkpoint(self._entries(rng)))
        blob[8] = 2
        with pytest.raises(CheckpointError, match="version"):
            dc.decode_checkpoint(bytes(blob))

    def test_missing_file(self, temp_dir):
        """Loading a missing file is a CheckpointError."""
        with pytest.raises(CheckpointError, match="not found"):
            dc.load_checkpoint(temp_dir / "absent.ckpt")

    def test_restore_params_shape_check(self):
        """Restoring into a differently shaped ParamSet fails."""
        params = ParamSet("actor")
        params.add("w", np.ones(3))
        with pytest.raises(ShapeError):
            dc.restore_params(params, {"actor/w": np.ones(4)}, "actor")
        with pytest.raises(CheckpointError):
            dc.restore_params(params, {}, "actor")


class TestLayers:
    """Dense layers and MLPs."""

    def test_zero_last_layer(self, rng):
        """A zero-initialized head outputs exact zeros."""
        params = ParamSet("net")
        init_mlp(params, "mlp", [3, 8, 8, 4], rng, zero_last=True)
        out = mlp(rng.standard_normal((5, 3)), params.values(), "mlp", 3)
        np.testing.assert_array_equal(out, np.zeros((5, 4)))

    def test_he_uniform_bounds(self, rng):
        """Hidden weights lie within sqrt(6 / fan_in)."""
        params = ParamSet("net")
        init_mlp(params, "mlp", [6, 32, 2], rng)
        assert np.max(np.abs(params["mlp0.w"].value)) <= 1.0
        np.testing.assert_array_equal(params["mlp0.b"].value, np.zeros(32))

    def test_dense_over_leading_axes(self, rng):
        """dense maps (..., fan_in) to (..., fan_out) as x @ w + b."""
        params = ParamSet("net")
        init_dense(params, "out", 3, 2, rng)
        params["out.b"].value = np.array([0.5, -1.0])
        x = rng.standard_normal((4, 5, 3))
        out = dense(x, params.values(), "out")
        np.testing.assert_allclose(out, x @ params["out.w"].value + params["out.b"].value)
