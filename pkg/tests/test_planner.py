import numpy as np
import pytest

from helpers import BernoulliBanditEnv, ChainEnv, FixedRewardEnv

from neutrodose.cohort import CovariateClass, PatientState, encode_state
from neutrodose.planner import (
    GreedyDecision,
    PlannerConfig,
    QTable,
    UntrainedStateError,
    VirtualPatientEnv,
    discounted_return,
    epsilon,
    greedy_policy,
    mcts_train,
    puct_select,
    q_planning,
    reward,
    uct_select,
)
from neutrodose.pkpd import DomainError
from neutrodose.policies import RewardSpec


class TestReward:
    def test_published_values(self):
        assert reward(4) == -2.0
        assert reward(2) == 1.0
        assert reward(0) == -1.0

    def test_variant_stronger_penalty(self):
        spec = RewardSpec(grade_rewards=(-1, 1, 1, 1, -3))
        assert reward(4, spec) == -3.0


class TestDiscountedReturn:
    def test_all_plus_one(self):
        assert discounted_return([1.0] * 6, 0.5) == pytest.approx(1.96875, abs=1e-12)

    def test_all_minus_two(self):
        assert discounted_return([-2.0] * 6, 0.5) == pytest.approx(-3.9375, abs=1e-12)

    def test_gamma_zero(self):
        assert discounted_return([0.7, 5.0, -3.0], 0.0) == 0.7


class TestEpsilon:
    def test_one_remaining_cycle(self):
        cfg = PlannerConfig()
        assert epsilon(5, cfg) == pytest.approx(9.0, abs=1e-12)

    def test_six_remaining(self):
        cfg = PlannerConfig()
        expected = 3.0 * np.sqrt(9.0 * 1.96875)
        assert epsilon(0, cfg) == pytest.approx(expected, abs=1e-12)
        assert epsilon(0, cfg) == pytest.approx(12.628093680362053, abs=1e-9)

    def test_horizon_is_zero(self):
        assert epsilon(6, PlannerConfig()) == 0.0

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            epsilon(7, PlannerConfig())


class TestUctSelect:
    def test_all_zero_picks_lowest(self):
        q = np.zeros(39)
        n = np.zeros(39, dtype=np.int64)
        assert uct_select(q, n, 9.0) == 0

    def test_exploration_term(self):
        # N(s) = 4 and n(s, d) = 0 gives exploration factor sqrt(4)/1 = 2
        q = np.zeros(3)
        n = np.array([1, 0, 3], dtype=np.int64)
        assert uct_select(q, n, 1.0) == 1
        scores = q + 1.0 * np.sqrt(4) / (n + 1)
        assert scores[1] == pytest.approx(2.0)

    def test_zero_eps_is_greedy(self):
        q = np.array([0.3, 0.9, 0.1])
        n = np.array([5, 5, 5], dtype=np.int64)
        assert uct_select(q, n, 0.0) == 1

    def test_unvisited_uses_zero_q(self):
        q = np.array([-5.0, 0.0, -5.0])  # never-backed-up dose keeps q = 0
        n = np.array([10, 0, 10], dtype=np.int64)
        assert uct_select(q, n, 0.0) == 1


class TestPuctSelect:
    def test_uniform_prior_matches_uct_ranking(self):
        q = np.array([0.1, 0.8, 0.4, 0.2])
        n = np.array([3, 1, 2, 4], dtype=np.int64)
        prior = np.full(4, 0.25)
        for eps in (0.0, 1.0, 10.0):
            assert puct_select(q, n, prior, eps) == uct_select(q, n, eps * 0.25)

    def test_flat_q_follows_prior(self):
        q = np.zeros(4)
        n = np.array([0, 1, 0, 0], dtype=np.int64)
        prior = np.array([0.1, 0.1, 0.6, 0.2])
        assert puct_select(q, n, prior, 5.0) == 2

    def test_zero_eps_is_greedy(self):
        q = np.array([0.3, 0.9, 0.1])
        n = np.array([1, 1, 1], dtype=np.int64)
        prior = np.array([0.8, 0.1, 0.1])
        assert puct_select(q, n, prior, 0.0) == 1


class TestMctsTrain:
    def test_fixed_rewards_recovered_exactly(self):
        env = FixedRewardEnv([0.2, -1.0, 0.7])
        cfg = PlannerConfig(episodes=30, n_cycles=1)
        table = mcts_train(env, cfg, seed=0)
        assert np.allclose(table.q[0], [0.2, -1.0, 0.7])
        assert table.n[0].sum() == 30

    def test_incremental_mean_update(self):
        # two returns 0.5 then 1.1 through the same pair -> q = 0.8 via
        # q' = q + (G - q)/N at N = 2
        class TwoValueEnv(FixedRewardEnv):
            def __init__(self):
                super().__init__([0.0])
                self.calls = 0

            def step(self, ctx, action, rng):
                self.calls += 1
                return (0.5 if self.calls == 1 else 1.1), -1

        env = TwoValueEnv()
        wide = RewardSpec(grade_rewards=(0.0, 1.0, 1.0, 1.0, 2.0))
        cfg = PlannerConfig(episodes=2, n_cycles=1, reward_spec=wide)
        table = mcts_train(env, cfg, seed=1)
        assert table.q[0, 0] == pytest.approx(0.8, abs=1e-12)
        assert table.n[0, 0] == 2

    def test_bandit_oracle(self):
        wins = 0
        for seed in range(10):
            env = BernoulliBanditEnv((0.9, 0.1))
            cfg = PlannerConfig(episodes=2000, n_cycles=1,
                                reward_spec=RewardSpec(grade_rewards=(0, 1, 1, 1, 1)))
            table = mcts_train(env, cfg, seed=seed)
            wins += int(np.argmax(table.q[0]) == 0)
        assert wins == 10

    def test_debug_mode_exact_batch_mean(self):
        rewards = np.random.default_rng(4).uniform(-2.0, 1.0, size=(3, 4))
        env = ChainEnv(rewards)
        cfg = PlannerConfig(episodes=200, n_cycles=3)
        table = mcts_train(env, cfg, seed=2, debug=True)
        sums = table.meta["debug_sums"]
        for (s, a), (tot, cnt) in sums.items():
            assert table.q[s, a] == pytest.approx(tot / cnt, abs=1e-12)
            assert table.n[s, a] == cnt

    def test_root_visits_equal_episodes(self):
        env = ChainEnv(np.zeros((2, 5)))
        table = mcts_train(env, PlannerConfig(episodes=57, n_cycles=2), seed=0)
        assert table.n[0].sum() == 57

    def test_training_reproducible(self):
        env1 = VirtualPatientEnv(6)
        env2 = VirtualPatientEnv(6)
        cfg = PlannerConfig(episodes=40)
        t1 = mcts_train(env1, cfg, seed=9)
        t2 = mcts_train(env2, cfg, seed=9)
        assert np.array_equal(t1.q, t2.q)
        assert np.array_equal(t1.n, t2.n)

    def test_return_bounds_asserted(self):
        env = FixedRewardEnv([5.0])  # outside the [-2, 1] reward range
        with pytest.raises(AssertionError):
            mcts_train(env, PlannerConfig(episodes=1, n_cycles=1), seed=0)


class TestQPlanning:
    def test_single_backup_value(self):
        # q = 0, alpha = 0.1, R = 1, gamma = 0.5, max next q = 2 -> 0.2
        env = ChainEnv(np.array([[1.0], [0.0]]))
        table = QTable.zeros(2, 1)
        table.q[1, 0] = 2.0
        cfg = PlannerConfig(episodes=1, gamma=0.5, n_cycles=2)
        q_planning(env, cfg, seed=0, alpha=0.1, eps_greedy=0.0, table=table)
        assert table.q[0, 0] == pytest.approx(0.2, abs=1e-12)

    def test_terminal_empty_max(self):
        env = FixedRewardEnv([1.0])
        cfg = PlannerConfig(episodes=1, n_cycles=1)
        table = q_planning(env, cfg, seed=0, alpha=0.25)
        assert table.q[0, 0] == pytest.approx(0.25)  # q += alpha (R - q)

    def test_alpha_one_bellman_sweep(self):
        env = ChainEnv(np.array([[0.5], [2.0]]))
        cfg = PlannerConfig(episodes=1, gamma=0.5, n_cycles=2)
        table = q_planning(env, cfg, seed=0, alpha=1.0, eps_greedy=0.0)
        assert table.q[1, 0] == 2.0
        assert table.q[0, 0] == pytest.approx(0.5 + 0.5 * 0.0)  # next q was 0 pre-update

    def test_alpha_bounds(self):
        env = FixedRewardEnv([1.0])
        with pytest.raises(DomainError):
            q_planning(env, PlannerConfig(episodes=1, n_cycles=1), seed=0, alpha=0.0)


class TestGreedyPolicy:
    def _table(self):
        from neutrodose.cohort import N_DECISION_STATES

        return QTable.zeros(N_DECISION_STATES, 39)

    def test_single_visited_dose(self):
        table = self._table()
        state = PatientState(CovariateClass(0, 0, 0), (2,))
        idx = encode_state(state)
        table.q[idx, 7] = -0.5
        table.n[idx, 7] = 3
        decision = greedy_policy(table, state)
        assert decision.action == 7
        assert not decision.fallback

    def test_increasing_row_picks_max_dose(self):
        table = self._table()
        state = PatientState(CovariateClass(0, 0, 0), ())
        idx = encode_state(state)
        table.q[idx] = np.linspace(-1, 1, 39)
        table.n[idx] = 1
        assert greedy_policy(table, state).action == 38
        assert greedy_policy(table, state).dose_mgm2 == 250.0

    def test_constant_shift_invariance(self):
        table = self._table()
        state = PatientState(CovariateClass(1, 2, 3), (0, 1))
        idx = encode_state(state)
        table.q[idx] = np.random.default_rng(0).normal(size=39)
        table.n[idx] = 1
        before = greedy_policy(table, state).action
        table.q[idx] += 123.456
        assert greedy_policy(table, state).action == before

    def test_fallback_to_ancestor(self):
        table = self._table()
        cls = CovariateClass(0, 1, 2)
        parent = PatientState(cls, (3,))
        idx = encode_state(parent)
        table.q[idx, 12] = 0.9
        table.n[idx, 12] = 5
        decision = greedy_policy(table, PatientState(cls, (3, 4)))
        assert decision.action == 12
        assert decision.fallback
        assert decision.state_used == parent

    def test_untrained_raises(self):
        table = self._table()
        with pytest.raises(UntrainedStateError):
            greedy_policy(table, PatientState(CovariateClass(1, 1, 1), (0, 0)))


class TestQTableIO:
    def test_save_load_round_trip(self, tmp_path):
        table = QTable.zeros(100, 7, meta={"seed": 3, "episodes": 42})
        rng = np.random.default_rng(0)
        table.q[:] = rng.normal(size=(100, 7))
        table.n[:] = rng.integers(0, 50, size=(100, 7))
        path = tmp_path / "table.qtbl"
        table.save(path)
        loaded = QTable.load(path)
        assert np.array_equal(loaded.q, table.q)
        assert np.array_equal(loaded.n, table.n)
        assert loaded.meta["seed"] == 3

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a table")
        with pytest.raises(DomainError):
            QTable.load(path)
