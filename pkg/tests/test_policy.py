import math

import numpy as np
import pytest

from snapcube.geometry import AngleGrid
from snapcube.network import (
    Architecture, PolicyWeights, episode_forward, forward, initial_hidden, surrogate, surrogate_grad,
)
from snapcube.objective import ObjectiveConfig
from snapcube.policy import (
    ActionSpace, MomentumSGD, NonFiniteGradient, PanoramaEnv, RewardBaselines, TrainConfig,
    Trajectory, TrainingDiverged, estimate_baselines, reinforce_gradient, reinforce_update,
    rollout, run_policy, sample_action, step_reward, train,
)
from snapcube.scenes import SceneDistribution, synth_scene

GRID = AngleGrid(20)
TINY = dict(channels=(2, 3, 4), feature_size=8, hidden_size=6, predictor_size=5)


def masks(n, start=0, height=32):
    dist = SceneDistribution(height=height)
    return [synth_scene(dist.sample(s))[1] for s in range(start, start + n)]


def envs(n, start=0, face=16):
    return [PanoramaEnv(m, GRID, face) for m in masks(n, start)]


def tiny_weights(face=16, seed=0, n_actions=21):
    return PolicyWeights.initialize(Architecture(face_size=face, n_actions=n_actions, **TINY), seed)


# ---------------------------------------------------------------- bandit
BANDIT = Architecture(face_size=16, n_actions=2, **TINY)


def run_bandit(seed, updates=500, lr=0.01, momentum=0.9):
    """Single-step bandit: action 0 pays 1, action 1 pays 0.

    Returns P(action 0) before each update.
    """
    rng = np.random.default_rng(seed)
    w = PolicyWeights.initialize(BANDIT, seed)
    obs = rng.random((1, 4, 16, 16)) < 0.3
    opt = MomentumSGD(lr, momentum)
    probs = []
    for _ in range(updates):
        pdf, _ = forward(obs[0], initial_hidden(w), w)
        probs.append(float(pdf[0]))
        a = sample_action(pdf, rng)
        tr = Trajectory(angles=[GRID[0]], shifts=[0], actions=[a], action_indices=[a],
                        pdfs=pdf[None], scores=[0.0], best=[0.0],
                        rewards=[1.0 if a == 0 else 0.0], observations=obs)
        w = reinforce_update([tr], w, optimizer=opt)
    return probs


def test_bandit_probability_increases():
    p = run_bandit(0, updates=200)
    assert p[-1] > p[0]
    # single updates are noisy; compare 20-update averages
    windows = [np.mean(p[i:i + 20]) for i in range(0, 200, 20)]
    assert all(b > a for a, b in zip(windows, windows[1:]))


# ---------------------------------------------------------------- actions
def test_action_space():
    a = ActionSpace(20)
    assert len(a) == 21
    assert list(a.offsets) == list(range(-10, 11))
    assert a.offset(a.index(-3)) == -3


def test_zero_weights_uniform_pdf():
    w = PolicyWeights.zeros(Architecture(face_size=16, n_actions=21, **TINY))
    pdf, _ = forward(np.ones((4, 16, 16)), initial_hidden(w), w)
    assert np.allclose(pdf, 1 / 21, atol=0, rtol=1e-12)


def test_forward_deterministic():
    w = tiny_weights()
    x = np.random.default_rng(0).random((4, 16, 16)) < 0.5
    a = forward(x, initial_hidden(w), w)[0]
    b = forward(x, initial_hidden(w), w)[0]
    assert np.array_equal(a, b)
    assert abs(a.sum() - 1) < 1e-9


class TestSampleAction:
    def test_one_hot(self):
        rng = np.random.default_rng(0)
        pdf = np.zeros(21)
        pdf[4] = 1
        assert all(sample_action(pdf, rng) == 4 for _ in range(200))

    def test_reproducible(self):
        pdf = np.full(21, 1 / 21)
        r1, r2 = np.random.default_rng(3), np.random.default_rng(3)
        assert [sample_action(pdf, r1) for _ in range(50)] == [sample_action(pdf, r2) for _ in range(50)]

    def test_two_action_frequency(self):
        rng = np.random.default_rng(1)
        draws = np.array([sample_action(np.array([0.75, 0.25]), rng) for _ in range(100_000)])
        assert abs(np.mean(draws == 0) - 0.75) < 0.01

    def test_binomial_bounds(self):
        rng = np.random.default_rng(2)
        pdf = rng.random(21)
        pdf /= pdf.sum()
        n = 100_000
        counts = np.bincount([sample_action(pdf, rng) for _ in range(n)], minlength=21)
        sigma = np.sqrt(n * pdf * (1 - pdf))
        assert np.all(np.abs(counts - n * pdf) <= 3 * sigma + 1)


class TestStepReward:
    def test_literal_min_example(self):
        assert step_reward(0.25, 0.30, "literal-min") == pytest.approx(-0.05)

    def test_equal(self):
        assert step_reward(0.3, 0.3, "literal-min") == 0
        assert step_reward(0.3, 0.3, "clipped-gain") == 0

    def test_two_readings(self):
        assert step_reward(0.30, 0.25, "literal-min") == 0
        assert step_reward(0.30, 0.25, "clipped-gain") == pytest.approx(0.05)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            step_reward(0.1, 0.2, "gain")


class TestBaselines:
    def test_constant_objective(self):
        env = PanoramaEnv(np.zeros((32, 64), bool), GRID, 16)
        b = estimate_baselines([env], 4, seed=0, rollouts=5)
        assert b.values == (0.0, 0.0, 0.0, 0.0)

    def reference(self, env_list, T, seed, rollouts, mode):
        # independent re-implementation: draw the whole random stream first
        rng = np.random.default_rng(seed)
        draws = [[int(rng.integers(21)) - 10 for _ in range(T)]
                 for _ in range(len(env_list) * rollouts)]
        rewards = np.zeros((len(draws), T))
        for i, moves in enumerate(draws):
            table = env_list[i // rollouts].table()
            positions = np.cumsum(moves) % 20
            seen = np.concatenate([[table[0]], table[positions]])
            running = np.minimum.accumulate(seen)
            for t in range(T):
                o, f = running[t], seen[t + 1]
                rewards[i, t] = min(o - f, 0.0) if mode == "literal-min" else max(o - f, 0.0)
        return rewards

    def test_single_rollout(self):
        e = envs(1)
        b = estimate_baselines(e, 4, seed=5, rollouts=1, mode="literal-min")
        assert np.allclose(b.values, self.reference(e, 4, 5, 1, "literal-min")[0], atol=1e-15)

    @pytest.mark.parametrize("mode", ["literal-min", "clipped-gain"])
    def test_duplicate_implementation(self, mode):
        e = envs(50)
        b = estimate_baselines(e, 4, seed=9, rollouts=20, mode=mode)
        ref = self.reference(e, 4, 9, 20, mode).mean(axis=0)
        assert np.max(np.abs(b.as_array() - ref)) < 1e-12
        assert len(b) == 4

    def test_empty(self):
        with pytest.raises(ValueError):
            estimate_baselines([], 4)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            RewardBaselines((0.0, math.nan))


class TestReinforceUpdate:
    def trajs(self, w, reward=0.0):
        e = envs(3)
        out = rollout(e, w, 3, np.random.default_rng(0), reward_mode="literal-min")
        for tr in out:
            tr.rewards = [reward] * len(tr.rewards)
        return out

    def test_zero_reward_no_change(self):
        w = tiny_weights()
        new = reinforce_update(self.trajs(w), w, lr=0.01)
        assert all(np.array_equal(new[k], w[k]) for k in w.params)

    def test_zero_reward_momentum_decay(self):
        w = tiny_weights()
        opt = MomentumSGD(0.01, 0.9)
        w1 = reinforce_update(self.trajs(w, 1.0), w, optimizer=opt)
        w2 = reinforce_update(self.trajs(w1), w1, optimizer=opt)
        for k in w.params:
            assert np.allclose(w2[k] - w1[k], 0.9 * (w1[k] - w[k]))

    def test_non_finite_gradient(self):
        w = tiny_weights()
        trajs = self.trajs(w)
        trajs[0].rewards[0] = math.inf
        with pytest.raises(NonFiniteGradient):
            reinforce_gradient(trajs, w)

    def test_direction_follows_surrogate(self):
        from snapcube.network import surrogate
        w = tiny_weights()
        trajs = self.trajs(w, 1.0)
        for tr, r in zip(trajs, (1.0, -0.5, 0.3)):
            tr.rewards = [r, -r, 2 * r]
        obs = np.stack([t.observations for t in trajs])
        acts = np.array([t.action_indices for t in trajs])
        rew = np.array([t.rewards for t in trajs])
        before = surrogate(obs, acts, rew, w)
        after = surrogate(obs, acts, rew, reinforce_update(trajs, w, lr=1e-3))
        assert after > before


class TestRunPolicy:
    def test_budget_one_is_canonical(self):
        e = envs(1)[0]
        r, tr = run_policy(None, tiny_weights(), 1, GRID, 0, env=e)
        assert [a.grid_index for a in tr.angles] == [0]
        assert r.best_score == e.score(0) and r.budget_used == 1

    def test_forced_zero_action(self):
        e = envs(1)[0]
        zero = ActionSpace(20).index(0)
        r, tr = run_policy(None, tiny_weights(), 5, GRID, 0, env=e, forced=zero)
        assert all(a.theta == 0 for a in tr.angles)
        assert r.best_score == e.score(0)
        assert r.budget_used == 5

    @pytest.mark.parametrize("seed", range(5))
    def test_trajectory_invariants(self, seed):
        e = envs(1, start=seed)[0]
        r, tr = run_policy(None, tiny_weights(seed=seed), 6, GRID, seed, env=e)
        assert tr.shifts[0] == 0 and tr.angles[0].theta == 0
        for t in range(1, 6):
            assert tr.shifts[t] == tr.actions[t - 1]
            k = (tr.angles[t - 1].grid_index + tr.shifts[t]) % 20
            assert tr.angles[t].grid_index == k
            assert 0 <= tr.angles[t].theta < math.pi / 2
        assert tr.best == list(np.minimum.accumulate(tr.scores))
        assert r.best_score == min(tr.scores)
        assert r.best_score == e.score(r.best_angle.grid_index)
        assert np.allclose(tr.pdfs.sum(axis=1), 1)

    def test_literal_min_rewards_non_positive(self):
        w = tiny_weights()
        trajs = rollout(envs(8), w, 4, np.random.default_rng(1), reward_mode="literal-min")
        assert all(r <= 0 for tr in trajs for r in tr.rewards)

    def test_action_count_mismatch(self):
        with pytest.raises(ValueError):
            rollout(envs(1), tiny_weights(n_actions=5), 2, np.random.default_rng(0))


def small_config(**kw):
    base = dict(epochs=2, batch_size=8, T=3, face_size=16, seed=4, baseline_rollouts=3)
    base.update(kw)
    return TrainConfig(**base)


ARCH16 = Architecture(face_size=16, **TINY)


class TestTrain:
    def test_zero_lr_flat_trace(self):
        w, log = train(small_config(lr=0.0), masks(16), masks(8, 100), arch=ARCH16)
        curves = [rec["val_F"] for rec in log]
        assert len(log) == 3 and all(c == curves[0] for c in curves)

    def test_deterministic(self):
        a = train(small_config(), masks(16), masks(8, 100), arch=ARCH16)
        b = train(small_config(), masks(16), masks(8, 100), arch=ARCH16)
        assert a[1] == b[1]
        assert all(np.array_equal(a[0][k], b[0][k]) for k in a[0].params)

    def test_log_has_both_readings(self):
        _, log = train(small_config(reward_mode="clipped-gain"), masks(16), masks(4, 100),
                       arch=ARCH16)
        rec = log[-1]
        assert rec["mean_train_reward"] >= 0
        assert rec["mean_train_reward_literal-min"] <= 0
        assert len(rec["baselines"]) == 3 and len(rec["val_F"]) == 3

    def test_shared_seeds_rejected(self):
        with pytest.raises(ValueError):
            train(small_config(), masks(2), masks(2), train_seeds=[0, 1], val_seeds=[1, 2])

    def test_empty(self):
        with pytest.raises(ValueError):
            train(small_config(), [], masks(2))

    def test_divergence_keeps_last_good(self):
        with pytest.raises(TrainingDiverged) as info:
            train(small_config(lr=1e300, reward_mode="clipped-gain", epochs=3),
                  masks(16), [], arch=ARCH16)
        assert info.value.weights.is_finite()

    def test_config_reports_every_problem(self):
        with pytest.raises(ValueError) as info:
            TrainConfig(epochs=0, lr=-1, momentum=1.5, reward_mode="x")
        msg = str(info.value)
        for word in ("epochs", "lr", "momentum", "reward_mode"):
            assert word in msg

    def test_callback_gets_weights(self):
        seen = []
        train(small_config(epochs=1), masks(8), [], arch=ARCH16,
              callback=lambda rec, w: seen.append((rec["epoch"], w.is_finite())))
        assert seen == [(0, True), (1, True)]


def test_entropy_bonus_gradient():
    w = tiny_weights(n_actions=5)
    rng = np.random.default_rng(3)
    obs = rng.random((2, 3, 4, 16, 16)) < 0.4
    acts = rng.integers(0, 5, (2, 3))
    rew = rng.normal(size=(2, 3))
    coef = 0.3

    def objective(wt):
        pdfs, _ = episode_forward(obs, wt)
        return surrogate(obs, acts, rew, wt) - coef * float((pdfs * np.log(pdfs)).sum())

    g = surrogate_grad(obs, acts, rew, w, coef)
    for name in ("pred2.w", "rnn.wh", "conv2.w"):
        arr = w.params[name]
        idx = tuple(int(i) for i in np.unravel_index(np.argmax(np.abs(g[name])), arr.shape))
        old = arr[idx]
        arr[idx] = old + 1e-6
        fp = objective(w)
        arr[idx] = old - 1e-6
        fm = objective(w)
        arr[idx] = old
        assert (fp - fm) / 2e-6 == pytest.approx(g[name][idx], rel=1e-5)


def test_entropy_bonus_pushes_toward_uniform():
    w = tiny_weights(n_actions=5)
    w.params["pred2.b"][:] = [3.0, 0, 0, 0, 0]
    obs = np.zeros((1, 2, 4, 16, 16), bool)
    acts = np.zeros((1, 2), int)
    g = surrogate_grad(obs, acts, np.zeros((1, 2)), w, 1.0)
    assert g["pred2.b"][0] < 0 and np.all(g["pred2.b"][1:] > 0)


def test_negative_entropy_coef_rejected():
    with pytest.raises(ValueError):
        TrainConfig(entropy_coef=-1)
