import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pli_lab.data import TransformSpec, make_split
from pli_lab.errors import ConfigurationError, DomainError, ProtocolError
from pli_lab.federation import (
    Federation,
    ProtocolConfig,
    average_weights,
    era,
    read_registry_csv,
    write_registry_csv,
)
from pli_lab.federation.training import accuracy
from pli_lab.nn import entropy, softmax_tau
from pli_lab.nn.network import classifier_net


def _fed(split, scheme, seed=0, **kw):
    kw.setdefault("rounds", 1)
    kw.setdefault("epoch_scale", 0.2)
    return Federation(split, ProtocolConfig(scheme=scheme, **kw), seed=seed)


class _Recorder:
    def __init__(self):
        self.views = []

    def observe(self, view):
        self.views.append(view)


class TestProtocolConfig:
    def test_defaults(self):
        assert ProtocolConfig().num_rounds == 5
        assert ProtocolConfig(scheme="fedavg").num_rounds == 3
        cfg = ProtocolConfig()
        assert cfg.fedgems_epsilon == 0.75 and cfg.dsfl_era_temperature == 0.1

    @pytest.mark.parametrize("kw", [{"scheme": "fedsgd"}, {"rounds": 0}, {"fedgems_epsilon": 0.0},
                                    {"fedgems_epsilon": 1.5}, {"dsfl_era_temperature": 0.0},
                                    {"private_epochs": -1}, {"lr": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            ProtocolConfig(**kw)

    def test_epoch_scaling(self):
        cfg = ProtocolConfig(epoch_scale=0.2)
        assert cfg.epochs("transfer") == 1 and cfg.epochs("consensus") == 1
        assert ProtocolConfig(transfer_epochs=0).epochs("transfer") == 0


class TestConsensus:
    def test_two_client_mean(self):
        reg = np.array([[[1.0, 2.0]], [[3.0, 4.0]]])
        np.testing.assert_array_equal(Federation.aggregate_mean(reg), [[2.0, 3.0]])

    def test_single_client_passthrough(self, rng):
        reg = rng.standard_normal((1, 5, 4))
        np.testing.assert_array_equal(Federation.aggregate_mean(reg), reg[0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 5), st.integers(0, 10_000))
    def test_permutation_invariant(self, k, seed):
        r = np.random.default_rng(seed)
        reg = r.standard_normal((k, 6, 3))
        perm = r.permutation(k)
        np.testing.assert_allclose(Federation.aggregate_mean(reg[perm]), Federation.aggregate_mean(reg),
                                   atol=1e-12)

    def test_malformed_registry(self):
        with pytest.raises(ProtocolError):
            Federation.aggregate_mean(np.zeros((0, 3, 2)))

    def test_fedmd_consensus_is_registry_mean(self, tiny_split):
        fed = _fed(tiny_split, "fedmd")
        fed.run()
        np.testing.assert_allclose(fed.state.consensus, fed.state.registry[1].mean(axis=0), atol=1e-6)
        assert fed.state.consensus.shape == (len(fed.public_x), fed.num_outputs)

    def test_fedmd_single_client(self, tiny_corpus):
        split = make_split(tiny_corpus[1], 1, 3, TransformSpec("box_blur", 3), seed=2)
        fed = _fed(split, "fedmd")
        fed.run()
        np.testing.assert_array_equal(fed.state.consensus, fed.state.registry[1][0])

    def test_fedmd_requires_pretraining(self, tiny_split):
        with pytest.raises(ProtocolError):
            _fed(tiny_split, "fedmd").round_fedmd()


class TestEra:
    def test_uniform_stays_uniform(self):
        np.testing.assert_allclose(era(np.full((1, 5), 0.2)), 0.2, atol=1e-12)

    def test_argmax_preserved(self):
        out = era(np.array([[0.5, 0.3, 0.2]]))
        assert out.argmax() == 0
        np.testing.assert_allclose(out.sum(), 1.0)

    @pytest.mark.parametrize("j", [2, 3])
    def test_entropy_reduced_on_random_draws(self, j):
        p = np.random.default_rng(0).dirichlet(np.ones(j), size=1000)
        assert np.all(entropy(era(p, 0.1)) <= entropy(p) + 1e-12)

    def test_entropy_can_rise_for_many_classes(self):
        # p / 0.1 spans at most [0, 10], so near-zero entries are lifted toward the rest
        p = np.array([[0.5, 0.5] + [0.0] * 8])
        assert entropy(era(p, 0.1))[0] > entropy(p)[0]

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_nonpositive_temperature(self, t):
        with pytest.raises(DomainError):
            era(np.full((1, 3), 1 / 3), t)

    def test_called_once_per_round(self, tiny_split):
        fed = _fed(tiny_split.as_unlabeled(), "dsfl", rounds=3)
        fed.run()
        assert fed.era_calls == 3

    def test_dsfl_consensus(self, tiny_split):
        fed = _fed(tiny_split.as_unlabeled(), "dsfl")
        obs = _Recorder()
        fed.run([obs])
        reg = fed.state.registry[1]
        assert obs.views[0].outputs_are_probs
        np.testing.assert_allclose(reg.sum(axis=2), 1.0, atol=1e-5)
        expected = softmax_tau(reg.astype(np.float64).mean(axis=0), 0.1)
        np.testing.assert_allclose(fed.state.consensus, expected, atol=1e-6)
        np.testing.assert_allclose(era(reg[::-1].astype(np.float64).mean(axis=0)), expected, atol=1e-6)

    def test_dsfl_output_space_is_private_classes(self, tiny_split):
        fed = _fed(tiny_split, "dsfl")
        assert fed.num_outputs == len(tiny_split.targets)
        assert fed.public_y is None


class TestFedGems:
    def test_consensus_is_server_forward(self, tiny_split):
        fed = _fed(tiny_split, "fedgems")
        fed.run()
        np.testing.assert_allclose(fed.state.consensus, fed.state.server.predict(fed.public_x), atol=1e-6)

    def test_unit_epsilon_admits_all_samples(self, tiny_split, rng):
        fed = _fed(tiny_split, "fedgems", fedgems_epsilon=1.0)
        n, j = 4, fed.num_outputs
        y = fed.public_y[:n]
        out = rng.standard_normal((n, j))
        out[np.arange(n), y] -= 50.0                       # server wrong everywhere
        latest = rng.standard_normal((2, len(fed.public_x), j))
        latest[:, np.arange(n), y] += 50.0                 # every client right
        loss, _ = fed._fedgems_server_loss(latest, None)(out, np.arange(n))
        # oracle: cross-entropy plus full-weight KL toward the mean client logits, every sample
        logp = out - np.log(np.exp(out - out.max(1, keepdims=True)).sum(1, keepdims=True)) - out.max(1, keepdims=True)
        ce = -logp[np.arange(n), y].mean()
        t = softmax_tau(latest[:, :n].mean(axis=0))
        kl = (t * (np.log(t) - logp)).sum(1).mean()
        assert loss == pytest.approx(ce + kl, rel=1e-6)

    def test_smaller_epsilon_downweights(self, tiny_split, rng):
        n = 4
        full = _fed(tiny_split, "fedgems", fedgems_epsilon=1.0)
        half = _fed(tiny_split, "fedgems", fedgems_epsilon=0.5)
        y = full.public_y[:n]
        out = rng.standard_normal((n, full.num_outputs))
        out[np.arange(n), y] -= 50.0
        latest = rng.standard_normal((2, len(full.public_x), full.num_outputs))
        latest[:, np.arange(n), y] += 50.0
        lf, _ = full._fedgems_server_loss(latest, None)(out, np.arange(n))
        lh, _ = half._fedgems_server_loss(latest, None)(out, np.arange(n))
        l0, _ = half._fedgems_server_loss(None, None)(out, np.arange(n))
        assert lh - l0 == pytest.approx(0.5 * (lf - l0), rel=1e-6)

    def test_server_accuracy_does_not_drop(self, desk_corpus):
        wins = 0
        for seed in range(3):
            split = make_split(desk_corpus[1], 2, 12, TransformSpec("box_blur", 9), seed=seed)
            fed = _fed(split, "fedgems", seed=seed, epoch_scale=1.0)
            before = accuracy(fed.state.server, fed.public_x, fed.public_y)
            fed.round_fedgems()
            wins += accuracy(fed.state.server, fed.public_x, fed.public_y) >= before
        assert wins >= 2

    def test_needs_public_labels(self, tiny_split):
        with pytest.raises(ProtocolError):
            _fed(tiny_split.as_unlabeled(), "fedgems").round_fedgems()


class TestFedAvg:
    def test_identical_clients_average_to_themselves(self, rng):
        w = [rng.standard_normal((3, 4)).astype(np.float32), rng.standard_normal(4).astype(np.float32)]
        avg = average_weights([w, [a.copy() for a in w]], np.array([5.0, 5.0]))
        for a, b in zip(avg, w):
            np.testing.assert_allclose(a, b, atol=1e-6)

    def test_single_client(self, tiny_corpus):
        split = make_split(tiny_corpus[1], 1, 3, seed=1)
        fed = _fed(split, "fedavg")
        fed.run()
        for a, b in zip(fed.state.server.get_weights(), fed.state.clients[0].get_weights()):
            np.testing.assert_array_equal(a, b)

    def test_permutation_invariant(self, rng):
        sets = [[rng.standard_normal(5)] for _ in range(3)]
        sizes = np.array([1.0, 2.0, 3.0])
        perm = [2, 0, 1]
        a = average_weights(sets, sizes)[0]
        b = average_weights([sets[i] for i in perm], sizes[perm])[0]
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_weighted_by_data_size(self, tiny_split):
        fed = _fed(tiny_split, "fedavg")
        fed.run()
        sizes = np.array([len(x) for x in fed.private_x], dtype=np.float64)
        expect = sum(s * c.get_weights()[0].astype(np.float64)
                     for s, c in zip(sizes / sizes.sum(), fed.state.clients))
        np.testing.assert_allclose(fed.state.server.get_weights()[0], expect, atol=1e-6)

    def test_gradient_view(self, tiny_split):
        fed = _fed(tiny_split, "fedavg")
        obs = _Recorder()
        fed.run([obs])
        view = obs.views[0]
        assert len(view.client_grads) == 2
        assert [g.shape for g in view.client_grads[0]] == [w.shape for w in view.weights]
        assert not hasattr(view, "clients")

    def test_heterogeneous_architectures_fatal(self, tiny_split):
        fed = _fed(tiny_split, "fedavg")
        fed.state.clients[1] = classifier_net(fed.num_outputs + 1, 32, name="odd")
        with pytest.raises(ProtocolError, match="homogeneous"):
            fed.round_fedavg()


class TestPretraining:
    def test_zero_epochs_leave_parameters(self, tiny_split):
        fed = _fed(tiny_split, "fedmd", transfer_epochs=0)
        before = [c.get_weights() for c in fed.state.clients]
        fed.pretrain_clients()
        for net, w0 in zip(fed.state.clients, before):
            for a, b in zip(net.get_weights(), w0):
                np.testing.assert_array_equal(a, b)

    def test_only_before_first_round(self, tiny_split):
        fed = _fed(tiny_split, "fedmd")
        fed.run()
        with pytest.raises(ProtocolError):
            fed.pretrain_clients()

    def test_empty_private_set_fatal(self, tiny_split):
        broken = dataclasses.replace(tiny_split, private=[tiny_split.private[0], []])
        with pytest.raises(ProtocolError, match="empty private"):
            Federation(broken, ProtocolConfig())

    def test_accuracy_and_loss_curve(self, desk_corpus):
        split = make_split(desk_corpus[1], 2, 12, TransformSpec("box_blur", 9), seed=0)
        fed = Federation(split, ProtocolConfig(transfer_epochs=10), seed=0)
        fed.pretrain_clients()
        for k in range(2):
            assert fed.client_accuracy(k) > 1 / fed.num_outputs
            curve = np.array(fed.history["client_private_loss"][k])
            epochs = curve.reshape(10, -1).mean(axis=1)
            assert np.mean(np.diff(epochs) <= 0) >= 0.8


class TestRegistry:
    @pytest.mark.parametrize("scheme", ["fedmd", "fedgems", "dsfl"])
    def test_complete_after_each_round(self, tiny_split, scheme):
        fed = _fed(tiny_split, scheme, rounds=2)
        obs = _Recorder()
        fed.run([obs])
        assert sorted(fed.state.registry) == [1, 2]
        for reg in fed.state.registry.values():
            assert reg.shape == (2, len(fed.public_x), fed.num_outputs)
            assert np.all(np.isfinite(reg))
        assert [v.round for v in obs.views] == [1, 2]
        assert all(not hasattr(v, "clients") for v in obs.views)

    def test_incomplete_registry_fatal(self, tiny_split):
        fed = _fed(tiny_split, "fedmd")
        with pytest.raises(ProtocolError, match="incomplete"):
            fed.view()

    def test_concurrent_equals_sequential(self, tiny_split):
        a = _fed(tiny_split, "fedmd", rounds=2)
        b = _fed(tiny_split, "fedmd", rounds=2, workers=2)
        a.run()
        b.run()
        for t in (1, 2):
            np.testing.assert_array_equal(a.state.registry[t], b.state.registry[t])

    def test_csv_round_trip(self, tmp_path, rng):
        reg = rng.standard_normal((2, 5, 3)).astype(np.float32)
        write_registry_csv(tmp_path / "r.csv", 4, reg)
        t, back = read_registry_csv(tmp_path / "r.csv")
        assert t == 4
        np.testing.assert_array_equal(back, reg)
