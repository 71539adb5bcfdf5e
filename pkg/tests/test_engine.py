import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vhlsim import data, engine, nn
from vhlsim.errors import AggregationError
from vhlsim.vhl import VhlConfig

SPEC = nn.MlpSpec([3, 5, 4], 3)


def model(seed):
    return nn.init_params(SPEC, np.random.default_rng(seed))


def update(cid, params, n=10, steps=1):
    return engine.ClientUpdate(cid, params, n, steps)


@pytest.fixture
def scenario():
    ds = data.make_synthetic_mixture(3, 3, 40, 3.0, 1.0, 0)
    shards = data.partition_lda(ds, 4, 0.5, 1)
    return ds, shards


def test_lr_schedule():
    assert engine.lr_at_round(0.1, 0) == 0.1
    assert engine.lr_at_round(0.1, 1) == 0.992 * 0.1
    assert abs(engine.lr_at_round(0.01, 100) - 0.01 * 0.992**100) < 1e-18
    assert abs(engine.lr_at_round(0.01, 100) - 0.004478) < 1e-6


class TestFedAvg:
    def test_identical_models(self):
        m = model(0)
        out = engine.aggregate_fedavg([update(i, m.copy(), n=10 * (i + 1)) for i in range(3)])
        np.testing.assert_allclose(out.flat, m.flat, rtol=0, atol=1e-15)

    def test_two_equal_clients(self):
        a, b = model(1), model(2)
        out = engine.aggregate_fedavg([update(0, a), update(1, b)])
        np.testing.assert_allclose(out.flat, (a.flat + b.flat) / 2, atol=1e-15)

    def test_explicit_weights(self):
        a, b = model(1), model(2)
        out = engine.aggregate_fedavg([update(0, a), update(1, b)], [0.25, 0.75])
        np.testing.assert_allclose(out.flat, 0.25 * a.flat + 0.75 * b.flat, atol=1e-12)

    def test_empty(self):
        with pytest.raises(AggregationError):
            engine.aggregate_fedavg([])

    def test_permutation_invariant(self):
        ups = [update(i, model(i), n=7 * i + 3) for i in range(5)]
        a = engine.aggregate_fedavg(ups)
        b = engine.aggregate_fedavg(ups[::-1])
        assert a.flat.tobytes() == b.flat.tobytes()


class TestFedNova:
    def test_equal_tau_matches_fedavg(self):
        g = model(0)
        ups = [update(i, model(i + 1), n=5 * (i + 1), steps=4) for i in range(3)]
        np.testing.assert_allclose(engine.aggregate_fednova(g, ups).flat, engine.aggregate_fedavg(ups).flat,
                                   rtol=0, atol=1e-12)

    def test_single_client(self):
        g, w = model(0), model(1)
        out = engine.aggregate_fednova(g, [update(0, w, steps=7)])
        np.testing.assert_allclose(out.flat, w.flat, rtol=0, atol=1e-12)

    def test_two_clients_by_hand(self):
        g = nn.ModelParams(SPEC, np.full(SPEC.size, 1.0))
        w1 = nn.ModelParams(SPEC, np.full(SPEC.size, 0.5))
        w2 = nn.ModelParams(SPEC, np.full(SPEC.size, -2.0))
        # p = (0.5, 0.5), tau = (1, 3): d = 0.5*(0.5/1) + 0.5*(3/3) = 0.75, tau_eff = 2
        out = engine.aggregate_fednova(g, [update(0, w1, 10, 1), update(1, w2, 10, 3)])
        np.testing.assert_allclose(out.flat, 1.0 - 2.0 * 0.75, atol=1e-12)

    def test_zero_tau(self):
        with pytest.raises(AggregationError):
            engine.aggregate_fednova(model(0), [update(0, model(1), steps=0)])


class TestScaffold:
    def state(self, params, k):
        return engine.ServerState(0, params, "scaffold", 0, k)

    def test_zero_gradient_clients_keep_zero_variates(self):
        g = model(0)
        st = engine.scaffold_server_update(self.state(g, 4), [update(i, g.copy(), steps=3) for i in range(2)], 0.1)
        assert np.all(st.control.flat == 0)
        assert all(np.all(c.flat == 0) for c in st.client_controls.values())

    def test_full_participation_mean(self):
        g = model(0)
        st = self.state(g, 3)
        for r in range(3):
            ups = [update(i, model(10 * r + i), n=3 + i, steps=2 + i) for i in range(3)]
            st = engine.scaffold_server_update(st, ups, 0.05)
            mean_ci = np.mean([st.client_controls[i].flat for i in range(3)], axis=0)
            np.testing.assert_allclose(mean_ci, st.control.flat, rtol=0, atol=1e-12)

    def test_one_step_variate_equals_gradient(self):
        w = model(0)
        grad = nn.ModelParams(SPEC, np.linspace(-1.0, 2.0, SPEC.size))
        lr = 0.1
        w1, _ = nn.sgd_momentum_step(w, grad, lr, 0.9, 0.0)
        st = engine.scaffold_server_update(self.state(w, 1), [update(0, w1, steps=1)], lr)
        np.testing.assert_allclose(st.client_controls[0].flat, grad.flat, rtol=0, atol=1e-12)

    def test_fixed_point_all_strategies(self):
        g = model(3)
        ups = [update(i, g.copy(), n=4 + i, steps=1 + i) for i in range(3)]
        np.testing.assert_allclose(engine.aggregate_fedavg(ups).flat, g.flat, rtol=0, atol=1e-15)
        np.testing.assert_allclose(engine.aggregate_fednova(g, ups).flat, g.flat, rtol=0, atol=1e-15)
        st = engine.scaffold_server_update(self.state(g, 3), ups, 0.1)
        np.testing.assert_allclose(st.params.flat, g.flat, rtol=0, atol=1e-15)


class TestDrift:
    def test_zero_when_equal(self):
        m = model(0)
        assert engine.client_drift(m, [m.copy(), m.copy()]) == 0.0

    def test_single_offset(self):
        m = model(0)
        v = np.random.default_rng(1).normal(size=SPEC.size)
        assert abs(engine.client_drift(m, [nn.ModelParams(SPEC, m.flat + v)]) - np.linalg.norm(v)) < 1e-12

    def test_three_models_by_hand(self):
        z = nn.ModelParams(SPEC, np.zeros(SPEC.size))
        ms = []
        for k in (1.0, 2.0, 3.0):
            v = np.zeros(SPEC.size)
            v[0], v[1] = 3.0 * k, 4.0 * k
            ms.append(nn.ModelParams(SPEC, v))
        assert abs(engine.client_drift(z, ms) - 10.0) < 1e-12

    @given(st.integers(0, 1000), st.integers(1, 5))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative_and_zero_iff_equal(self, seed, n):
        rng = np.random.default_rng(seed)
        agg = nn.ModelParams(SPEC, rng.normal(size=SPEC.size))
        others = [nn.ModelParams(SPEC, rng.normal(size=SPEC.size)) for _ in range(n)]
        assert engine.client_drift(agg, others) > 0
        assert engine.client_drift(agg, [agg.copy()] * n) == 0


class TestLocalTrain:
    def test_single_batch_is_one_sgd_step(self, scenario):
        ds, _ = scenario
        shard = data.ClientShard(0, np.arange(20), ds)
        cfg = engine.LocalConfig(epochs=1, base_lr=0.05, batch_size=64)
        w = model(4)
        up = engine.local_train(SPEC, w, shard, cfg, 0, engine.client_seed(0, 0, 0))
        trace = nn.forward(SPEC, w, shard.features)
        _, g = nn.cross_entropy(trace.logits, shard.labels)
        grad = nn.backward(SPEC, w, trace, g)
        expected, _ = nn.sgd_momentum_step(w, grad, 0.05, 0.9, 1e-4)
        np.testing.assert_allclose(up.params.flat, expected.flat, rtol=0, atol=1e-14)
        assert up.steps == 1

    def test_fedprox_zero_mu_matches_fedavg(self, scenario):
        _, shards = scenario
        w = model(5)
        cfg = engine.LocalConfig(epochs=2, base_lr=0.05, batch_size=8, fedprox_mu=0.0)
        seed = engine.client_seed(1, 2, 0)
        a = engine.local_train(SPEC, w, shards[0], cfg, 2, seed, strategy="fedavg")
        b = engine.local_train(SPEC, w, shards[0], cfg, 2, seed, strategy="fedprox")
        assert a.params.flat.tobytes() == b.params.flat.tobytes()

    def test_scaffold_zero_correction_matches_fedavg(self, scenario):
        _, shards = scenario
        w = model(5)
        cfg = engine.LocalConfig(epochs=2, base_lr=0.05, batch_size=8)
        seed = engine.client_seed(1, 2, 0)
        a = engine.local_train(SPEC, w, shards[0], cfg, 2, seed, strategy="fedavg")
        b = engine.local_train(SPEC, w, shards[0], cfg, 2, seed, strategy="scaffold", correction=w.zeros_like())
        assert a.params.flat.tobytes() == b.params.flat.tobytes()

    def test_fedprox_pulls_toward_global(self, scenario):
        _, shards = scenario
        w = model(5)
        seed = engine.client_seed(1, 0, 0)
        far = engine.local_train(SPEC, w, shards[0], engine.LocalConfig(base_lr=0.1, batch_size=4, fedprox_mu=0.0),
                                 0, seed, strategy="fedprox")
        near = engine.local_train(SPEC, w, shards[0], engine.LocalConfig(base_lr=0.1, batch_size=4, fedprox_mu=5.0),
                                  0, seed, strategy="fedprox")
        assert np.linalg.norm(near.params.flat - w.flat) < np.linalg.norm(far.params.flat - w.flat)


class TestRunRound:
    def test_weighted_mean_of_clients(self):
        ds = data.make_synthetic_mixture(3, 3, 400, 3.0, 1.0, 0)
        sizes = (100, 200, 700)
        bounds = np.cumsum((0,) + sizes)
        shards = [data.ClientShard(k, np.arange(bounds[k], bounds[k + 1]), ds) for k in range(3)]
        cfg = engine.LocalConfig(base_lr=0.05, batch_size=64)
        state = engine.ServerState(0, model(0), "fedavg", 7, 3)
        new, m = engine.run_round(SPEC, state, shards, cfg, 3)
        locals_ = [engine.local_train(SPEC, state.params, shards[k], cfg, 0, engine.client_seed(7, 0, k))
                   for k in range(3)]
        expected = sum(p * u.params.flat for p, u in zip((0.1, 0.2, 0.7), locals_))
        np.testing.assert_allclose(new.params.flat, expected, rtol=0, atol=1e-12)
        assert m.round == 1 and m.selected == (0, 1, 2)
        assert math.isnan(m.accuracy)

    def test_selection_is_seeded(self):
        a = engine.select_clients(3, 5, 10, 5)
        assert a == engine.select_clients(3, 5, 10, 5)
        assert len(set(a)) == 5

    @pytest.mark.parametrize("strategy", ["fedavg", "fedprox", "scaffold", "fednova"])
    def test_worker_count_does_not_matter(self, scenario, strategy):
        ds, shards = scenario
        cfg = engine.LocalConfig(base_lr=0.05, batch_size=8)
        results = []
        for workers in (1, 4):
            st = engine.ServerState(0, model(1), strategy, 3, len(shards))
            for _ in range(3):
                st, m = engine.run_round(SPEC, st, shards, cfg, 3, ds, workers=workers)
            results.append((st.params.flat.tobytes(), m.accuracy, m.client_drift))
        assert results[0] == results[1]

    def test_vhl_round_runs(self, scenario):
        from vhlsim.virtual import VirtualSpec, generate_noise_dataset

        ds, shards = scenario
        spec = nn.MlpSpec([3, 5, 4], 3, 3)
        virtual = generate_noise_dataset(VirtualSpec(3, 10, 1, 1, 3, seed=0))
        cfg = engine.LocalConfig(base_lr=0.05, batch_size=8, vhl=VhlConfig(mode="full", virtual_batch_size=8))
        st = engine.ServerState(0, nn.init_params(spec, np.random.default_rng(0)), "fedavg", 0, len(shards))
        st, m = engine.run_round(spec, st, shards, cfg, 2, ds, virtual)
        assert m.calibration_penalty > 0
        assert 0.0 <= m.accuracy <= 1.0
