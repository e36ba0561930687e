import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vriqa import nn
from vriqa.gradcheck import LAYER_CASES, layer_checks


def dense(w, b, dtype=np.float64):
    net = nn.build_network([("dense", {"in": len(w), "out": len(w[0])})], dtype)
    net.set_params([np.array(w, dtype), np.array(b, dtype)])
    return net


def relu_net():
    return nn.build_network([("dense", {"in": 4, "out": 6}), ("relu", {}), ("dense", {"in": 6, "out": 3}),
                             ("relu", {}), ("dense", {"in": 3, "out": 2})], np.float64)


def quadratic(target):
    def loss(out):
        diff = out - target
        return 0.5 * float(np.sum(diff * diff)), diff
    return loss


class TestForward:
    def test_hand_dense(self):
        out = nn.forward(dense([[2.0]], [1.0]), np.array([[3.0]])).output
        np.testing.assert_array_equal(out, [[7.0]])

    def test_zero_weights_give_zero(self, rng):
        net = nn.build_network([("dense", {"in": 5, "out": 4}), ("relu", {}), ("dense", {"in": 4, "out": 2})])
        out = nn.forward(net, rng.normal(size=(3, 5)).astype(np.float32)).output
        np.testing.assert_array_equal(out, np.zeros((3, 2)))

    def test_identity_dense(self, rng):
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(nn.forward(dense(np.eye(3), np.zeros(3)), x).output, x)

    def test_conv_matches_direct_loop(self, rng):
        net = nn.build_network([("conv2d", {"in": 2, "out": 3})], np.float64).initialize(rng, np.float64)
        w, b = net.params()
        x = rng.normal(size=(2, 9, 7, 2))
        out = nn.forward(net, x).output
        assert out.shape == (2, 4, 3, 3)
        ref = np.zeros_like(out)
        for i in range(4):
            for j in range(3):
                win = x[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                ref[:, i, j, :] = np.einsum("bhwc,hwco->bo", win, w) + b
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(nn.ShapeError):
            nn.forward(dense([[1.0, 2.0]], [0.0, 0.0]), np.ones((2, 3)))

    def test_incompatible_composition_raises(self):
        with pytest.raises(nn.ShapeError):
            nn.build_network([("dense", {"in": 3, "out": 4}), ("dense", {"in": 5, "out": 1})])

    def test_deterministic(self, rng):
        net = relu_net().initialize(rng, np.float64)
        x = rng.normal(size=(5, 4))
        a = nn.forward(net, x).output
        b = nn.forward(net.copy(), x.copy()).output
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-700, 700)))
    def test_softplus_positive(self, x):
        # below about -745 the true value underflows float64, so the domain stops short of that
        assert np.all(nn.forward(nn.build_network([("softplus", {})]), x).output > 0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)))
    def test_sigmoid_in_open_unit_interval(self, x):
        # beyond about +-36 the true value rounds to 0 or 1 in float64
        y = nn.forward(nn.build_network([("sigmoid", {})]), x).output
        assert np.all((y > 0) & (y < 1))


class TestBackward:
    def test_zero_out_grad(self, rng):
        net = relu_net().initialize(rng, np.float64)
        trace = nn.forward(net, rng.normal(size=(3, 4)))
        grads, dx = nn.backward(net, trace, np.zeros((3, 2)))
        for g in grads + [dx]:
            np.testing.assert_array_equal(g, 0)

    def test_dense_quadratic_hand_derivative(self):
        # f = 0.5 (w x + b - t)^2 -> df/dw = (w x + b - t) x, df/db = w x + b - t, df/dx = (w x + b - t) w
        w, b, x, t = 2.0, 1.0, 3.0, 4.0
        net = dense([[w]], [b])
        trace = nn.forward(net, np.array([[x]]))
        _, dout = quadratic(np.array([[t]]))(trace.output)
        (gw, gb), dx = nn.backward(net, trace, dout)
        r = w * x + b - t
        np.testing.assert_allclose(gw, [[r * x]])
        np.testing.assert_allclose(gb, [r])
        np.testing.assert_allclose(dx, [[r * w]])

    def test_stale_trace_raises(self, rng):
        net = relu_net().initialize(rng, np.float64)
        trace = nn.forward(net, rng.normal(size=(3, 4)))
        with pytest.raises(nn.ShapeError):
            nn.backward(net, trace, np.zeros((4, 2)))
        other = nn.build_network([("dense", {"in": 4, "out": 2})], np.float64)
        with pytest.raises(nn.ShapeError):
            nn.backward(other, trace, np.zeros((3, 2)))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_every_layer_kind_matches_finite_differences(self, seed):
        results = layer_checks(seed)
        assert {r.name for r in results} == set(LAYER_CASES)
        for r in results:
            assert r.checked > 0, r.name
            assert r.max_rel_error < 1e-4, r.to_dict()

    def test_random_relu_net(self, rng):
        net = relu_net().initialize(rng, np.float64)
        x = rng.normal(size=(6, 4))
        target = rng.normal(size=(6, 2))
        rep = nn.grad_check(net, quadratic(target), x)
        assert rep.checked > 0
        assert rep.max_rel_error < 1e-4


class TestGuidedBackward:
    def test_hand_relu(self):
        net = nn.build_network([("relu", {})], np.float64)
        trace = nn.forward(net, np.array([[-1.0, 2.0]]))
        np.testing.assert_array_equal(nn.guided_backward(net, trace, np.array([[1.0, -1.0]])), [[0.0, 0.0]])
        # plain backward only applies the forward mask
        np.testing.assert_array_equal(nn.backward(net, trace, np.array([[1.0, -1.0]]))[1], [[0.0, -1.0]])

    def test_no_relu_equals_backward(self, rng):
        net = nn.build_network([("dense", {"in": 4, "out": 3}), ("sigmoid", {})], np.float64)
        net.initialize(rng, np.float64)
        trace = nn.forward(net, rng.normal(size=(5, 4)))
        g = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(nn.guided_backward(net, trace, g), nn.backward(net, trace, g)[1])

    def test_all_negative_pre_activation_blocks(self, rng):
        net = nn.build_network([("dense", {"in": 3, "out": 4}), ("relu", {}), ("dense", {"in": 4, "out": 1})],
                               np.float64).initialize(rng, np.float64)
        net.layers[0].params[1][:] = -1e3
        trace = nn.forward(net, rng.normal(size=(2, 3)))
        np.testing.assert_array_equal(nn.guided_backward(net, trace, np.ones((2, 1))), 0)

    def test_equals_backward_when_all_signals_non_negative(self, rng):
        # non-negative weights, inputs and upstream gradient keep every relu input and backward signal >= 0
        net = nn.build_network([("dense", {"in": 3, "out": 4}), ("relu", {}), ("dense", {"in": 4, "out": 2}),
                                ("relu", {})], np.float64)
        net.set_params([rng.uniform(0.1, 1, size=p.shape) for p in net.params()])
        trace = nn.forward(net, rng.uniform(0, 1, size=(4, 3)))
        g = rng.uniform(0, 1, size=(4, 2))
        np.testing.assert_array_equal(nn.guided_backward(net, trace, g), nn.backward(net, trace, g)[1])


class TestAdam:
    def test_zero_gradient_fixed_point(self, rng):
        p = [rng.normal(size=(3, 2)), rng.normal(size=2)]
        before = [x.copy() for x in p]
        state = nn.AdamState.for_params(p)
        nn.adam_step(p, [np.zeros_like(x) for x in p], state, 0.01)
        for a, b in zip(p, before):
            np.testing.assert_array_equal(a, b)
        assert state.step == 1

    def test_first_step_is_signed_lr(self, rng):
        g = rng.normal(size=10)
        p = [np.zeros(10)]
        nn.adam_step(p, [g], nn.AdamState.for_params(p), 0.01)
        # bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
        np.testing.assert_allclose(p[0], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(p[0], -0.01 * np.sign(g), rtol=1e-6)

    def test_converges_on_square(self):
        w = [np.array([1.0])]
        state = nn.AdamState.for_params(w)
        for step in range(2000):
            nn.adam_step(w, [2 * w[0]], state, 0.01)
            if abs(w[0][0]) < 1e-3:
                break
        assert abs(w[0][0]) < 1e-3

    def test_shape_mismatch(self):
        p = [np.zeros(3)]
        with pytest.raises(nn.ShapeError):
            nn.adam_step(p, [np.zeros(4)], nn.AdamState.for_params(p), 0.1)
        with pytest.raises(nn.ShapeError):
            nn.adam_step(p, [np.zeros(3), np.zeros(3)], nn.AdamState.for_params(p), 0.1)


class TestGradCheck:
    def test_linear_quadratic_exact(self, rng):
        net = nn.build_network([("dense", {"in": 4, "out": 3})], np.float64).initialize(rng, np.float64)
        rep = nn.grad_check(net, quadratic(rng.normal(size=(5, 3))), rng.normal(size=(5, 4)))
        assert rep.max_rel_error < 1e-8
        assert rep.skipped_kinks == 0

    def test_guardrail(self):
        net = nn.build_network([("dense", {"in": 100, "out": 60})])
        assert net.param_count > nn.GRADCHECK_MAX_PARAMS
        with pytest.raises(ValueError):
            nn.grad_check(net, quadratic(np.zeros((1, 60))), np.zeros((1, 100)))

    def test_detects_wrong_gradient(self, rng):
        net = nn.build_network([("dense", {"in": 3, "out": 2})], np.float64).initialize(rng, np.float64)
        target = rng.normal(size=(2, 2))

        def wrong(out):
            v, g = quadratic(target)(out)
            return v, 2 * g
        assert nn.grad_check(net, wrong, rng.normal(size=(2, 3))).max_rel_error > 0.1

    def test_kink_coordinates_skipped(self):
        # relu input sits exactly on the kink, so perturbing the bias flips the pattern
        net = nn.build_network([("dense", {"in": 1, "out": 1}), ("relu", {})], np.float64)
        net.set_params([np.array([[1.0]]), np.array([0.0])])
        rep = nn.grad_check(net, quadratic(np.array([[-1.0]])), np.array([[0.0]]))
        assert rep.skipped_kinks > 0


class TestSerialization:
    def test_round_trip(self, rng, tmp_path):
        a = relu_net().initialize(rng, np.float32)
        b = nn.build_network([("conv2d", {"in": 3, "out": 2}), ("relu", {}), ("global_avg_pool", {}),
                              ("dense", {"in": 2, "out": 1}), ("sigmoid", {})]).initialize(rng)
        path = tmp_path / "m.bin"
        nn.save_networks(path, {"a": a, "b": b}, {"note": 1})
        nets, meta = nn.load_networks(path)
        assert meta == {"note": 1}
        for name, net in (("a", a), ("b", b)):
            assert [l.kind for l in nets[name].layers] == [l.kind for l in net.layers]
            for x, y in zip(nets[name].params(), net.params()):
                np.testing.assert_array_equal(x, y.astype(np.float32))

    def test_byte_stable(self, rng, tmp_path):
        net = relu_net().initialize(rng, np.float32)
        nn.save_networks(tmp_path / "1", {"n": net})
        nn.save_networks(tmp_path / "2", {"n": net.copy()})
        assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()

    def test_truncated_payload(self, rng, tmp_path):
        path = tmp_path / "m"
        nn.save_networks(path, {"n": relu_net().initialize(rng, np.float32)})
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError):
            nn.load_networks(path)

    def test_not_a_container(self, tmp_path):
        path = tmp_path / "x"
        path.write_bytes(b"hello\n")
        with pytest.raises(ValueError):
            nn.load_networks(path)

    def test_seeded_init_reproducible(self):
        a = relu_net().initialize(np.random.default_rng(3), np.float32)
        b = relu_net().initialize(np.random.default_rng(3), np.float32)
        for x, y in zip(a.params(), b.params()):
            np.testing.assert_array_equal(x, y)
