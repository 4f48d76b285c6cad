import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wncs.channel import MarkovChannel, bernoulli_channel, stationary_distribution
from wncs.control import LqWeights, care_solve, mare_solve
from wncs.errors import DimensionError, DomainError
from wncs.mjls import GainSet, MjlsModel, initial_moments, propagate_moments
from wncs.plant import DiscretePlant, PENDULUM_X0
from wncs.sim import (PERCENTILES, SimConfig, empirical_cost, ensemble_to_csv,
                      ensemble_to_gnuplot, sample_channel, sample_channel_ensemble, simulate,
                      summary)

from conftest import random_channel


@pytest.fixture(scope="module")
def near_gains(near_model, weights):
    return care_solve(near_model, weights).gains


class TestChannelSampling:
    def test_lossless_channel_always_delivers(self):
        ch = MarkovChannel([[0.4, 0.6], [0.1, 0.9]], [1.0, 1.0])
        _, d = sample_channel(ch, 500, 1, np.random.default_rng(0), 20)
        assert d.all()

    def test_initial_mode(self):
        ch = MarkovChannel([[0.4, 0.6], [0.1, 0.9]], [0.2, 0.9])
        modes, _ = sample_channel(ch, 10, 1, np.random.default_rng(0), 50)
        assert (modes[:, 0] == 1).all()
        with pytest.raises(DomainError):
            sample_channel(ch, 10, 2, np.random.default_rng(0))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_occupancy_matches_stationary(self, seed):
        rng = np.random.default_rng(seed)
        ch = random_channel(rng, int(rng.integers(2, 5)))
        modes, _ = sample_channel(ch, 4000, 0, rng, 50)
        pi = stationary_distribution(ch.tpm)
        occ = np.bincount(modes[:, 200:].ravel(), minlength=ch.n_states) / modes[:, 200:].size
        # runs are independent; within-run correlation is absorbed by a generous 6 sigma on the run means
        per_run = np.stack([(modes[:, 200:] == i).mean(axis=1) for i in range(ch.n_states)], axis=1)
        se = per_run.std(axis=0, ddof=1) / np.sqrt(per_run.shape[0]) + 1e-3
        assert np.all(np.abs(occ - pi) < 6 * se)

    def test_transition_counts(self):
        ch = MarkovChannel([[0.7, 0.3], [0.05, 0.95]], [0.1, 0.99])
        modes, _ = sample_channel(ch, 5000, 0, np.random.default_rng(3), 20)
        a, b = modes[:, :-1].ravel(), modes[:, 1:].ravel()
        for i in range(2):
            row = np.bincount(b[a == i], minlength=2) / (a == i).sum()
            assert np.allclose(row, ch.tpm[i], atol=0.01)

    def test_near_empirical_per(self, near_model):
        _, d = sample_channel_ensemble(near_model.channel, 1200, 1, 7, 2000)
        assert 1 - d.mean() == pytest.approx(1 - near_model.channel.mean_delivery, abs=1e-3)

    def test_block_streams_are_prefix_stable(self, near_model):
        a = sample_channel_ensemble(near_model.channel, 50, 0, 11, 1500)
        b = sample_channel_ensemble(near_model.channel, 50, 0, 11, 1000)
        assert np.array_equal(a[0][:1000], b[0]) and np.array_equal(a[1][:1000], b[1])


class TestSimulate:
    def test_reproducible(self, near_model, near_gains):
        cfg = SimConfig(horizon=100, n_runs=300, seed=5)
        a, b = simulate(near_model, near_gains, cfg), simulate(near_model, near_gains, cfg)
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.percentiles, b.percentiles)
        assert np.array_equal(a.terminal_norms, b.terminal_norms)

    def test_seed_changes_output(self, near_model, near_gains):
        a = simulate(near_model, near_gains, SimConfig(horizon=50, n_runs=100, seed=1))
        b = simulate(near_model, near_gains, SimConfig(horizon=50, n_runs=100, seed=2))
        assert not np.array_equal(a.terminal_norms, b.terminal_norms)

    def test_policies_share_channel_draws(self, near_model, near_gains, weights):
        cfg = SimConfig(horizon=200, n_runs=200, seed=9)
        k = mare_solve(near_model.plant, weights, near_model.channel.mean_delivery).gains[0]
        a, b = simulate(near_model, near_gains, cfg), simulate(near_model, k, cfg)
        assert a.empirical_per == b.empirical_per and a.max_burst == b.max_burst

    def test_noise_off_is_deterministic_across_runs(self, plant, weights):
        model = MjlsModel(plant, bernoulli_channel(1.0))
        k = mare_solve(plant, weights, 1.0).gains
        ens = simulate(model, k, SimConfig(horizon=80, n_runs=5, noise_on=False))
        assert np.allclose(ens.std, 0.0)
        x = np.array(PENDULUM_X0)
        acl = plant.a + plant.b @ k[0]
        for _ in range(80):
            x = acl @ x
        assert np.allclose(ens.mean[-1], x, atol=1e-12)

    def test_open_loop_on_total_loss(self, plant):
        model = MjlsModel(plant, bernoulli_channel(0.0))
        ens = simulate(model, np.ones((1, 4)), SimConfig(horizon=30, n_runs=3, noise_on=False))
        x = np.array(PENDULUM_X0)
        for _ in range(30):
            x = plant.a @ x
        assert np.allclose(ens.mean[-1], x)

    def test_percentile_ordering(self, near_model, near_gains):
        ens = simulate(near_model, near_gains, SimConfig(horizon=60, n_runs=400, seed=4))
        assert ens.percentiles.shape == (len(PERCENTILES), 61, 4)
        assert np.all(np.diff(ens.percentiles, axis=0) >= 0)
        assert np.all(ens.active_runs == 400)

    def test_monte_carlo_matches_exact_moments(self):
        rng = np.random.default_rng(21)
        ch = MarkovChannel([[0.8, 0.2], [0.3, 0.7]], [0.5, 0.95])
        a = np.array([[1.02, 0.1], [0.0, 0.9]])
        b = np.array([[0.0], [1.0]])
        plant = DiscretePlant(a, b, 0.01, 0.01 * np.eye(2))
        model = MjlsModel(plant, ch)
        gains = GainSet(np.stack([[[-0.3, -0.4]], [[-0.6, -0.8]]]))
        x0 = (1.0, -0.5)
        T, R = 30, 40_000
        ens = simulate(model, gains, SimConfig(horizon=T, n_runs=R, initial_state=x0,
                                               seed=int(rng.integers(1 << 31)),
                                               snapshot_steps=(10, 30)))
        states = propagate_moments(model, gains, initial_moments(model, x0, 0), T)
        for k in (10, 30):
            xs = ens.snapshots[k]
            m_exact = states[k].mean()
            se = xs.std(axis=0, ddof=1) / np.sqrt(R)
            assert np.all(np.abs(xs.mean(axis=0) - m_exact) < 4 * se)
            second = np.einsum("ri,rj->ij", xs, xs) / R
            outer = np.einsum("ri,rj->rij", xs, xs)
            se2 = outer.std(axis=0, ddof=1) / np.sqrt(R)
            assert np.all(np.abs(second - states[k].second_moment()) < 4 * se2 + 1e-12)

    def test_divergence_is_flagged(self):
        plant = DiscretePlant([[2.0]], [[1.0]], 0.01, [[1.0]])
        model = MjlsModel(plant, bernoulli_channel(0.5))
        ens = simulate(model, np.zeros((1, 1)),
                       SimConfig(horizon=800, n_runs=4, seed=0, initial_state=(1.0,)),
                       weights=LqWeights([[1.0]], [[1.0]]))
        assert ens.n_diverged == 4
        assert np.all(ens.terminal_norms == pytest.approx(1e150))
        assert np.all(ens.active_runs[-1] == 0) and np.isnan(ens.mean[-1]).all()
        assert ens.empirical_cost() == float("inf")

    def test_gain_validation(self, near_model):
        cfg = SimConfig(horizon=5, n_runs=2)
        with pytest.raises(DimensionError):
            simulate(near_model, np.zeros((3, 1, 4)), cfg)
        with pytest.raises(DimensionError):
            simulate(near_model, np.zeros((1, 2)), cfg)
        with pytest.raises(DimensionError):
            simulate(near_model, np.zeros((1, 4)), SimConfig(horizon=5, n_runs=2, initial_state=(0, 1)))

    @pytest.mark.parametrize("kw", [dict(horizon=0), dict(n_runs=0), dict(seed=-1),
                                    dict(initial_mode=-1), dict(horizon=5, snapshot_steps=(6,))])
    def test_config_validation(self, kw):
        with pytest.raises(DomainError):
            SimConfig(**kw)


class TestCost:
    def test_noise_free_stabilized_cost_vanishes(self, plant, weights):
        quiet = DiscretePlant(plant.a, plant.b, plant.ts, np.zeros((4, 4)), plant.labels)
        model = MjlsModel(quiet, bernoulli_channel(0.95))
        k = mare_solve(quiet, weights, 0.95).gains
        ens = simulate(model, k, SimConfig(horizon=4000, n_runs=50), weights=weights)
        assert ens.empirical_cost() < 1e-12

    def test_empirical_cost_helper(self):
        w = LqWeights(np.eye(2), [[2.0]])
        x = np.ones((3, 4, 2))
        u = np.ones((3, 4, 1))
        assert empirical_cost(x, u, w) == pytest.approx(4.0)

    @pytest.mark.slow
    def test_near_cost_matches_prediction(self, near_model, near_gains, weights):
        predicted = care_solve(near_model, weights).cost
        ens = simulate(near_model, near_gains, SimConfig(horizon=1200, n_runs=4000, seed=1),
                       weights=weights)
        assert ens.empirical_cost() == pytest.approx(predicted, rel=0.05)


class TestOutput:
    def test_csv(self, near_model, near_gains):
        ens = simulate(near_model, near_gains, SimConfig(horizon=20, n_runs=50))
        rows = list(csv.reader(io.StringIO(ensemble_to_csv(ens))))
        assert len(rows) == 22 and rows[0][0] == "k"
        assert len(rows[0]) == 1 + 4 * (2 + len(PERCENTILES))
        assert float(rows[1][1]) == pytest.approx(ens.mean[0, 0], abs=1e-12)

    def test_gnuplot(self, near_model, near_gains):
        ens = simulate(near_model, near_gains, SimConfig(horizon=10, n_runs=20))
        text = ensemble_to_gnuplot(ens)
        blocks = [b for b in text.split("\n\n\n") if b.strip()]
        assert len(blocks) == 4
        data = np.loadtxt(io.StringIO(blocks[0]))
        assert data.shape == (11, 3 + len(PERCENTILES))

    def test_summary(self, near_model, near_gains, weights):
        ens = simulate(near_model, near_gains, SimConfig(horizon=20, n_runs=30), weights=weights)
        s = summary(ens)
        assert s["runs"] == 30 and s["horizon"] == 20 and "empirical_cost" in s
