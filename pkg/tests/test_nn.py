import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pli_lab.errors import ConfigurationError, DomainError, NonFiniteError, StateError
from pli_lab.nn import (
    Adam,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Flatten,
    Identity,
    Linear,
    MaxPool2d,
    Network,
    Parameter,
    ReLU,
    Tanh,
    classifier_net,
    cross_entropy,
    entropy,
    inversion_net,
    kl_distill,
    kl_distill_logits,
    l1_distill,
    l2,
    soft_cross_entropy,
    softmax_tau,
)
from pli_lab.nn import checkpoint
from pli_lab.nn.gradcheck import check_layer, numeric_grad, relative_error

F64 = np.float64


def _layers(rng):
    return [
        ("conv", Conv2d(2, 3, 3, 1, 0, rng=rng, dtype=F64), (2, 2, 5, 5)),
        ("conv_strided_padded", Conv2d(2, 2, 3, 2, 1, rng=rng, dtype=F64), (2, 2, 6, 6)),
        ("deconv_lift", ConvTranspose2d(4, 3, 4, 1, 0, rng=rng, dtype=F64), (2, 4, 1, 1)),
        ("deconv_double", ConvTranspose2d(3, 2, 4, 2, 1, rng=rng, dtype=F64), (2, 3, 3, 3)),
        ("batchnorm", BatchNorm2d(3, dtype=F64), (4, 3, 3, 3)),
        ("linear", Linear(6, 4, rng=rng, dtype=F64), (3, 6)),
        ("relu", ReLU(), (3, 7)),
        ("tanh", Tanh(), (3, 7)),
        ("maxpool", MaxPool2d(3), (2, 2, 7, 7)),
        ("flatten", Flatten(), (2, 2, 3, 3)),
        ("identity", Identity(), (2, 5)),
    ]


class TestShapes:
    def test_identity_net_passes_input_through(self, rng):
        net = Network([Identity()], (3, 4, 4))
        x = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(net(x), x)

    def test_classifier_flatten_width(self):
        net = classifier_net(10)
        assert net.layers[3].output_shape((32, 20, 20)) == (12800,)
        assert net.layers[-1].in_features == 12800
        assert net.output_shape == (10,)

    def test_classifier_shape_law(self, rng):
        net = classifier_net(5, rng=rng)
        x = rng.uniform(-1, 1, (1, 3, 64, 64)).astype(np.float32)
        h = net.layers[0].forward(x)
        assert h.shape == (1, 32, 62, 62)
        h = net.layers[2].forward(net.layers[1].forward(h))
        assert h.shape == (1, 32, 20, 20)

    def test_inversion_output_range_and_size(self, rng):
        net = inversion_net(20, width=0.125, rng=rng)
        assert net.input_shape == (40, 1, 1)
        sides = [l.output_shape for l in net.layers]
        out = net(rng.dirichlet(np.ones(40), size=3)[:, :, None, None].astype(np.float32))
        assert out.shape == (3, 3, 64, 64)
        assert np.abs(out).max() <= 1.0
        assert sides  # shapes were inferred at construction

    def test_inversion_upsampling_chain(self):
        net = inversion_net(4, width=0.0625)
        shape = net.input_shape
        spatial = []
        for layer in net.layers:
            shape = layer.output_shape(shape)
            if isinstance(layer, ConvTranspose2d):
                spatial.append(shape[-1])
        assert spatial == [4, 8, 16, 32, 64]

    def test_full_width_parameter_count(self):
        # 1024-512-256-128 decoder for 20 classes
        assert inversion_net(20).num_parameters() == 11_677_315

    def test_bad_image_size_rejected(self):
        with pytest.raises(ConfigurationError):
            inversion_net(4, image_size=48)

    def test_input_shape_mismatch_names_layer(self, rng):
        net = classifier_net(3, image_size=16, rng=rng)
        with pytest.raises(ConfigurationError, match="layer 0"):
            net(rng.standard_normal((1, 3, 15, 16)))

    def test_incompatible_stack_rejected(self, rng):
        with pytest.raises(ConfigurationError, match="layer 1"):
            Network([Flatten(), Linear(10, 2, rng=rng)], (3, 2, 2))


class TestGradients:
    @pytest.mark.parametrize("case", range(11))
    def test_finite_difference_agreement(self, case):
        name, layer, shape = _layers(np.random.default_rng(case))[case]
        x = np.random.default_rng(100 + case).standard_normal(shape)
        errors = check_layer(layer, x, seed=case)
        assert max(errors.values()) < 1e-3, (name, errors)

    def test_linear_weight_gradient_closed_form(self, rng):
        lin = Linear(4, 3, rng=rng, dtype=F64)
        x = rng.standard_normal((1, 4))
        g = rng.standard_normal((1, 3))
        lin.forward(x)
        lin.backward(g)
        np.testing.assert_allclose(lin.params["weight"].grad, g.T @ x)

    def test_zero_upstream_gives_zero_gradients(self, rng):
        net = classifier_net(4, image_size=16, rng=rng, dtype=F64)
        out = net(rng.standard_normal((2, 3, 16, 16)))
        net.backward(np.zeros_like(out))
        for p in net.parameters():
            assert not np.any(p.grad)

    def test_backward_before_forward_is_state_error(self):
        with pytest.raises(StateError):
            classifier_net(3, image_size=16).backward(np.zeros((1, 3)))
        with pytest.raises(StateError):
            Linear(2, 2).backward(np.zeros((1, 2)))

    def test_whole_network_gradient(self, rng):
        net = inversion_net(3, image_size=8, width=0.05, rng=rng, dtype=F64)
        x = rng.dirichlet(np.ones(6), size=3)[:, :, None, None]
        w = rng.standard_normal((3, 3, 8, 8))
        f = lambda: float((net(x) * w).sum())
        net(x)
        gx = net.backward(w)
        assert relative_error(gx, numeric_grad(f, x)) < 1e-3

    def test_batchnorm_eval_uses_running_stats(self, rng):
        bn = BatchNorm2d(2, dtype=F64)
        for _ in range(200):
            bn.forward(rng.normal(3.0, 2.0, (16, 2, 4, 4)))
        np.testing.assert_allclose(bn.buffers["running_mean"], 3.0, atol=0.1)
        np.testing.assert_allclose(bn.buffers["running_var"], 4.0, rtol=0.1)
        bn.training = False
        y = bn.forward(np.full((1, 2, 1, 1), 3.0))
        np.testing.assert_allclose(y, 0.0, atol=0.1)

    def test_maxpool_tie_goes_to_lowest_index(self):
        pool = MaxPool2d(2)
        pool.forward(np.ones((1, 1, 2, 2)))
        g = pool.backward(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        p = Parameter(np.array([1.0, -2.0]))
        opt = Adam([p], lr=0.1)
        for _ in range(5):
            p.grad = np.zeros(2)
            opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_constant_gradient_moves_against_sign(self):
        p = Parameter(np.zeros(3))
        opt = Adam([p], lr=0.01)
        for _ in range(50):
            p.grad = np.array([2.0, -0.5, 1e-3])
            opt.step()
        np.testing.assert_array_equal(np.sign(p.data), [-1, 1, -1])

    def test_first_step_is_lr_times_sign(self):
        p = Parameter(np.zeros(3))
        opt = Adam([p], lr=1e-3)
        p.grad = np.array([0.3, -7.0, 2e-2])
        opt.step()
        # bias-corrected first step: lr * g / (|g| + eps)
        expected = -1e-3 * p.grad / (np.abs(p.grad) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-6)

    def test_matches_recurrence_with_decoupled_decay(self, rng):
        w0 = rng.standard_normal(4)
        grads = rng.standard_normal((6, 4))
        p = Parameter(w0.copy())
        opt = Adam([p], lr=0.05, weight_decay=0.1)
        w, m, v = w0.copy(), np.zeros(4), np.zeros(4)
        for t, g in enumerate(grads, 1):
            p.grad = g
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w * (1 - 0.05 * 0.1)
            w = w - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, w, rtol=1e-12)
        assert opt.state.step == 6

    def test_non_finite_gradient_aborts_with_context(self):
        p = Parameter(np.zeros((2, 2)))
        opt = Adam([p], names=["head.weight"])
        p.grad = np.array([[np.nan, 0.0], [np.inf, 1.0]])
        with pytest.raises(NonFiniteError, match=r"head\.weight.*2 bad"):
            opt.step()
        np.testing.assert_array_equal(p.data, 0.0)

    def test_moments_match_parameter_shapes(self):
        net = classifier_net(3, image_size=16)
        from pli_lab.nn import adam_for
        opt = adam_for(net)
        assert [m.shape for m in opt.state.m] == [p.data.shape for p in net.parameters()]


class TestSoftmaxEntropy:
    def test_equal_logits(self):
        for tau in (0.1, 1.0, 7.0):
            np.testing.assert_allclose(softmax_tau(np.array([2.5, 2.5]), tau), [0.5, 0.5])

    def test_closed_form_two_thirds(self):
        tau = 3.0
        np.testing.assert_allclose(softmax_tau(np.array([tau * np.log(2), 0.0]), tau), [2 / 3, 1 / 3])

    def test_nonpositive_tau_rejected(self):
        with pytest.raises(DomainError):
            softmax_tau(np.zeros(3), 0.0)
        with pytest.raises(DomainError):
            softmax_tau(np.zeros(3), -1.0)

    def test_stable_for_huge_logits(self):
        p = softmax_tau(np.array([1e4, 0.0, -1e4]))
        assert np.isfinite(p).all() and p[0] == pytest.approx(1.0)

    def test_entropy_examples(self):
        assert entropy(np.array([0.0, 1.0, 0.0])) == 0.0
        assert entropy(np.full(7, 1 / 7)) == pytest.approx(np.log(7))
        assert entropy(np.array([0.5, 0.25, 0.25])) == pytest.approx(1.5 * np.log(2))
        assert entropy(np.array([0.5, 0.25, 0.25])) == pytest.approx(1.0397, abs=1e-4)

    def test_entropy_rejects_negative(self):
        with pytest.raises(DomainError):
            entropy(np.array([1.2, -0.2]))

    @settings(max_examples=200, deadline=None)
    @given(arrays(F64, st.tuples(st.integers(1, 5), st.integers(2, 12)),
                  elements=st.floats(-50, 50)), st.floats(0.05, 20))
    def test_rows_on_simplex_and_entropy_bounded(self, logits, tau):
        p = softmax_tau(logits, tau)
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        h = entropy(p)
        assert (h >= -1e-12).all() and (h <= np.log(logits.shape[1]) + 1e-9).all()

    @settings(max_examples=200, deadline=None)
    @given(arrays(F64, st.integers(2, 20), elements=st.floats(-10, 10)))
    def test_higher_temperature_flattens(self, logits):
        assert entropy(softmax_tau(logits, 10.0)) >= entropy(softmax_tau(logits, 1.0)) - 1e-12


class TestLosses:
    def test_confident_correct_cross_entropy_near_zero(self):
        loss, _ = cross_entropy(np.array([[30.0, 0.0, 0.0]]), np.array([0]))
        assert loss < 1e-10

    def test_cross_entropy_label_range(self):
        with pytest.raises(DomainError):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_self_distances_are_zero(self, rng):
        x = rng.standard_normal((3, 5))
        p = softmax_tau(x)
        assert l1_distill(x, x)[0] == 0.0
        assert kl_distill(p, p)[0] == pytest.approx(0.0, abs=1e-12)
        assert l2(x, x)[0] == 0.0
        assert not np.any(l2(x, x)[1])

    def test_kl_gradient_matches_finite_differences(self, rng):
        s = rng.dirichlet(np.ones(5), size=3)
        t = rng.dirichlet(np.ones(5), size=3)
        _, g = kl_distill(s, t)
        ng = numeric_grad(lambda: kl_distill(s, t)[0], s)
        assert relative_error(g, ng) < 1e-3

    @pytest.mark.parametrize("which", ["ce", "soft_ce", "l1", "kl_logits", "l2"])
    def test_logit_gradients(self, rng, which):
        x = rng.standard_normal((4, 6))
        y = rng.integers(0, 6, 4)
        t = rng.dirichlet(np.ones(6), size=4)
        z = rng.standard_normal((4, 6))
        fn = {"ce": lambda: cross_entropy(x, y), "soft_ce": lambda: soft_cross_entropy(x, t),
              "l1": lambda: l1_distill(x, z), "kl_logits": lambda: kl_distill_logits(x, t),
              "l2": lambda: l2(x, z)}[which]
        g = fn()[1]
        assert relative_error(g, numeric_grad(lambda: fn()[0], x, 1e-6)) < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            l2(np.zeros((2, 3)), np.zeros((3, 2)))


class TestCheckpoint:
    def test_round_trip_preserves_weights_buffers_and_outputs(self, rng, tmp_path):
        net = inversion_net(3, image_size=8, width=0.05, rng=rng)
        net(rng.dirichlet(np.ones(6), size=4)[:, :, None, None].astype(np.float32))
        checkpoint.save(net, tmp_path / "g.ckpt")
        back = checkpoint.load(tmp_path / "g.ckpt")
        assert back.signature() == net.signature()
        for a, b in zip(net.get_weights(), back.get_weights()):
            np.testing.assert_array_equal(a, b)
        x = rng.dirichlet(np.ones(6), size=2)[:, :, None, None].astype(np.float32)
        np.testing.assert_array_equal(net.predict(x), back.predict(x))

    def test_header_is_little_endian(self):
        blob = checkpoint.dumps(classifier_net(2, image_size=8))
        assert blob[:4] == b"PLIN"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 5

    def test_corrupt_blob_rejected(self):
        with pytest.raises(Exception):
            checkpoint.loads(b"XXXX" + bytes(20))


class TestDeterminism:
    def test_same_seed_bitwise_identical(self):
        outs = []
        for _ in range(2):
            r = np.random.default_rng(9)
            net = classifier_net(4, image_size=16, rng=r)
            x = r.standard_normal((3, 3, 16, 16)).astype(np.float32)
            y = net(x)
            net.backward(np.ones_like(y))
            outs.append((y, [p.grad for p in net.parameters()]))
        np.testing.assert_array_equal(outs[0][0], outs[1][0])
        for a, b in zip(outs[0][1], outs[1][1]):
            np.testing.assert_array_equal(a, b)

    def test_parameter_count_invariant_under_training(self, rng):
        from pli_lab.nn import adam_for
        net = classifier_net(3, image_size=16, rng=rng)
        n0 = net.num_parameters()
        opt = adam_for(net)
        for _ in range(3):
            out = net(rng.standard_normal((4, 3, 16, 16)).astype(np.float32))
            _, g = cross_entropy(out, np.array([0, 1, 2, 0]))
            net.backward(g.astype(np.float32))
            opt.step()
        assert net.num_parameters() == n0
