import numpy as np
import pytest

from highway_v2v import policy as pol
from highway_v2v.policy import forward, init_params, log_prob_entropy, loss_and_grads
from highway_v2v.ppo import (
    Adam,
    RolloutBuffer,
    TrainConfig,
    collect_rollouts,
    compute_gae,
    flatten_buffer,
    normalize_advantages,
    ppo_loss,
    run_episode,
    train,
)
from highway_v2v.protocol import message_scale, observation_scale
from highway_v2v.rng import stream
from highway_v2v.simulation import EXITED, CRASHED, PASSED_EXIT, HighwayConfig
from oracles import gae_oracle, ppo_loss_oracle


def small_params(mode="v2v", cfg=None, seed=0):
    cfg = cfg or HighwayConfig(num_cars=4, max_steps=100, length_range=(120.0, 140.0))
    return (
        init_params(
            np.random.default_rng(seed),
            mode,
            max_senders=cfg.num_cars - 1,
            obs_scale=observation_scale(cfg),
            msg_scale=message_scale(cfg),
        ),
        cfg,
    )


class TestGAE:
    def test_undiscounted_return_to_go(self):
        rewards = np.array([1.0, 2.0, 3.0])
        adv, ret = compute_gae(rewards, np.zeros(3), 0.0, 1.0, 1.0)
        np.testing.assert_allclose(adv, [6.0, 5.0, 3.0], atol=1e-12)
        np.testing.assert_allclose(ret, adv, atol=1e-12)

    def test_single_terminal_step(self):
        adv, ret = compute_gae(np.array([-60.0]), np.array([2.0]), 0.0, 0.99, 0.95)
        assert adv[0] == pytest.approx(-62.0, abs=1e-12)
        assert ret[0] == pytest.approx(-60.0, abs=1e-12)

    def test_matches_double_sum_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            T = int(rng.integers(1, 50))
            rewards = rng.normal(0.0, 5.0, T)
            values = rng.normal(0.0, 5.0, T)
            gamma = rng.uniform(0.8, 1.0)
            lam = rng.uniform(0.8, 1.0)
            adv, ret = compute_gae(rewards, values, 0.0, gamma, lam)
            adv_o, ret_o = gae_oracle(rewards, values, gamma, lam)
            np.testing.assert_allclose(adv, adv_o, atol=1e-10)
            np.testing.assert_allclose(ret, ret_o, atol=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_gae(np.zeros(3), np.zeros(4))


class TestRollouts:
    def test_one_episode_splits_per_vehicle(self):
        params, cfg = small_params()
        eps = run_episode(params, cfg, 11)
        assert len(eps) == cfg.num_cars
        assert {e.car_id for e in eps} == set(range(cfg.num_cars))

    def test_reward_sums_match_accounting(self):
        params, cfg = small_params()
        for ep in run_episode(params, cfg, 12):
            bonus = {EXITED: 60.0, CRASHED: -60.0, PASSED_EXIT: -60.0}.get(ep.terminal_status, 0.0)
            assert sum(ep.rewards) == pytest.approx(-0.5 * len(ep) + bonus, abs=1e-9)

    def test_fixed_seed_bit_identical(self):
        params, cfg = small_params()
        b1 = collect_rollouts(params, cfg, 2, stream(5, "episodes"))
        b2 = collect_rollouts(params, cfg, 2, stream(5, "episodes"))
        assert len(b1) == len(b2) == 2 * cfg.num_cars
        for e1, e2 in zip(b1.episodes, b2.episodes):
            assert e1.terminal_status == e2.terminal_status
            np.testing.assert_array_equal(np.array(e1.rewards), np.array(e2.rewards))
            np.testing.assert_array_equal(np.stack(e1.obs), np.stack(e2.obs))
            np.testing.assert_array_equal(np.stack(e1.actions), np.stack(e2.actions))
            np.testing.assert_array_equal(np.stack(e1.slots), np.stack(e2.slots))

    def test_stored_log_probs_match_recompute(self):
        params, cfg = small_params()
        buffer = collect_rollouts(params, cfg, 1, stream(6, "episodes"), train_dropout=False)
        batch = flatten_buffer(buffer, 0.99, 0.95)
        logp, _ = log_prob_entropy(params, batch["obs"], batch["slots"], batch["actions"])
        np.testing.assert_allclose(logp, batch["old_logp"], atol=1e-12)

    def test_baseline_mode_has_no_slots(self):
        params, cfg = small_params("baseline")
        buffer = collect_rollouts(params, cfg, 1, stream(7, "episodes"), train_dropout=False)
        assert flatten_buffer(buffer, 0.99, 0.95)["slots"] is None


class TestPPOLoss:
    def batch_at_new_equals_old(self, seed=0, n=32):
        params, cfg = small_params("baseline")
        rng = np.random.default_rng(seed)
        obs = rng.normal(size=(n, 40))
        head_out, values = forward(params, obs)
        actions, logp = pol.sample(params, head_out, rng)
        return params, {
            "obs": obs,
            "actions": actions,
            "old_logp": logp,
            "advantages": normalize_advantages(rng.normal(size=n)),
            "returns": values + rng.normal(size=n),
        }

    def test_identity_policy(self):
        params, batch = self.batch_at_new_equals_old()
        _, diag = ppo_loss(params, batch)
        assert diag["clip_fraction"] == 0.0
        assert diag["policy_loss"] == pytest.approx(-np.mean(batch["advantages"]), abs=1e-12)
        assert diag["approx_kl"] == pytest.approx(0.0, abs=1e-12)

    def test_zero_advantages(self):
        params, batch = self.batch_at_new_equals_old(1)
        batch["advantages"] = np.zeros_like(batch["advantages"])
        _, diag = ppo_loss(params, batch)
        assert diag["policy_loss"] == 0.0

    def test_matches_scalar_oracle(self):
        params, batch = self.batch_at_new_equals_old(2, n=16)
        # Shift old log-probs so ratios differ from 1 and clipping engages.
        rng = np.random.default_rng(3)
        batch["old_logp"] = batch["old_logp"] + rng.normal(0.0, 0.3, 16)
        loss, diag = ppo_loss(params, batch, clip_eps=0.2, value_coef=0.5, entropy_coef=0.01)
        logp, ent = log_prob_entropy(params, batch["obs"], None, batch["actions"])
        _, values = forward(params, batch["obs"])
        want = ppo_loss_oracle(
            logp, batch["old_logp"], batch["advantages"], values, batch["returns"], ent, 0.2, 0.5, 0.01
        )
        assert loss == pytest.approx(want, abs=1e-12)

    def test_surrogate_gradient_is_vanilla_pg_at_identity(self):
        # At new == old the clipped-surrogate gradient must equal the plain
        # policy-gradient estimator -(1/N) sum A * grad logp, obtained here
        # by finite differences of the REINFORCE objective.
        params, batch = self.batch_at_new_equals_old(4, n=12)
        _, grads, _ = loss_and_grads(params, batch, 0.2, 0.0, 0.0, 1.0)

        def reinforce_loss():
            logp, _ = log_prob_entropy(params, batch["obs"], None, batch["actions"])
            return -float(np.mean(batch["advantages"] * logp))

        rng = np.random.default_rng(5)
        keys = sorted(params.params)
        for _ in range(60):
            key = keys[int(rng.integers(len(keys)))]
            if key.startswith("v_"):
                continue  # value net does not enter the surrogate
            idx = tuple(int(rng.integers(s)) for s in params.params[key].shape)
            from oracles import finite_difference

            fd = finite_difference(reinforce_loss, params.params, key, idx, h=1e-6)
            assert grads[key][idx] == pytest.approx(fd, abs=max(1e-8, 1e-5 * abs(fd)))

    def test_advantage_normalization(self):
        adv = np.random.default_rng(0).normal(3.0, 7.0, 500)
        out = normalize_advantages(adv)
        assert abs(out.mean()) < 1e-10
        assert abs(out.std() - 1.0) < 1e-10


class TestOptimizer:
    def test_zero_lr_is_identity(self):
        params, _ = small_params("baseline")
        before = {k: v.copy() for k, v in params.params.items()}
        opt = Adam(params.params)
        grads = {k: np.ones_like(v) for k, v in params.params.items()}
        opt.step(params.params, grads, 0.0)
        for k in before:
            np.testing.assert_array_equal(params.params[k], before[k])

    def test_step_moves_against_gradient(self):
        params = {"w": np.array([1.0, 2.0])}
        opt = Adam(params)
        opt.step(params, {"w": np.array([1.0, -1.0])}, 0.1)
        assert params["w"][0] < 1.0 and params["w"][1] > 2.0


class TestTrainLoop:
    def test_zero_episodes_returns_initial(self, tmp_path):
        cfg = HighwayConfig(num_cars=2, max_steps=30, length_range=(100.0, 110.0))
        tc = TrainConfig(total_episodes=0, episodes_per_iter=4)
        params, metrics = train(tc, cfg, seed=0, mode="baseline", out_dir=tmp_path)
        ref = init_params(
            stream(0, "init"), "baseline", max_senders=1,
            obs_scale=observation_scale(cfg), msg_scale=message_scale(cfg),
        )
        assert metrics == []
        for k in ref.params:
            np.testing.assert_array_equal(params.params[k], ref.params[k])

    def test_metrics_rows_equal_iterations(self, tmp_path):
        cfg = HighwayConfig(num_cars=2, max_steps=25, length_range=(100.0, 110.0))
        tc = TrainConfig(total_episodes=4, episodes_per_iter=2, epochs_per_iter=1, minibatch_size=32)
        _, metrics = train(tc, cfg, seed=1, mode="baseline", out_dir=tmp_path)
        assert len(metrics) == 2
        assert (tmp_path / "metrics.jsonl").read_text().count("\n") == 2
        assert (tmp_path / "checkpoint_final.npz").exists()

    @pytest.mark.parametrize("mode", ["emergent_continuous", "emergent_select"])
    def test_emergent_modes_train_one_iteration(self, mode):
        cfg = HighwayConfig(num_cars=3, max_steps=25, length_range=(100.0, 110.0))
        tc = TrainConfig(total_episodes=2, episodes_per_iter=2, epochs_per_iter=2, minibatch_size=32)
        params, metrics = train(tc, cfg, seed=2, mode=mode)
        assert len(metrics) == 1
        params.validate()  # all finite after the update

    def test_invalid_train_config(self):
        with pytest.raises(ValueError):
            TrainConfig(gamma=0.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(clip_eps=0.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(dropout_variant="sometimes").validate()
