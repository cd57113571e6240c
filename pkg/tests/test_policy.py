import math

import numpy as np
import pytest

from highway_v2v import policy as pol
from highway_v2v.policy import (
    CheckpointError,
    EMERGENT_MSG_DIM,
    HEAD_SCALE,
    MSG_CODE_DIM,
    PolicyParams,
    TrainingError,
    clamped_log_std,
    encode_messages,
    forward,
    gaussian_entropy,
    init_params,
    load_checkpoint,
    log_prob_entropy,
    loss_and_grads,
    messages_to_slots,
    sample,
    sample_action,
    save_checkpoint,
)
from highway_v2v.simulation import ContractError
from oracles import finite_difference, gaussian_log_prob_oracle


def make_batch(params, n, rng, adv_scale=1.0):
    """Random but consistent training batch for the given architecture."""
    obs = rng.normal(0.0, 1.0, (n, 40))
    slots = rng.normal(0.0, 1.0, (n, params.slot_dim)) if pol.uses_comm(params.mode) else None
    head_out, values = forward(params, obs, slots)
    actions, logp = sample(params, head_out, rng)
    return {
        "obs": obs,
        "slots": slots,
        "actions": actions,
        "old_logp": logp,
        "advantages": rng.normal(0.0, adv_scale, n),
        "returns": rng.normal(0.0, 1.0, n),
    }


class TestInit:
    @pytest.mark.parametrize("mode", pol.MODES)
    def test_column_norms(self, mode):
        params = init_params(np.random.default_rng(0), mode)
        for key, w in params.params.items():
            if not key.endswith(("W1", "W2", "W3", "enc_W")):
                continue
            norms = np.linalg.norm(w, axis=0)
            expected = HEAD_SCALE if key.endswith("W3") else 1.0
            np.testing.assert_allclose(norms, expected, atol=1e-12)

    def test_biases_and_log_std_zero(self):
        params = init_params(np.random.default_rng(0), "v2v")
        for key, v in params.params.items():
            if key.endswith(("b1", "b2", "b3", "enc_b")) or key == "log_std":
                np.testing.assert_array_equal(v, 0.0)

    def test_same_seed_identical(self):
        a = init_params(np.random.default_rng(3), "v2v")
        b = init_params(np.random.default_rng(3), "v2v")
        for key in a.params:
            np.testing.assert_array_equal(a.params[key], b.params[key])

    def test_shapes(self):
        params = init_params(np.random.default_rng(0), "v2v", max_senders=11)
        p = params.params
        assert p["enc_W"].shape == (231, 32)
        assert p["pi_W1"].shape == (72, 200)
        assert p["pi_W2"].shape == (200, 100)
        assert p["pi_W3"].shape == (100, 3)
        assert p["v_W3"].shape == (100, 1)
        assert p["log_std"].shape == (3,)
        baseline = init_params(np.random.default_rng(0), "baseline")
        assert baseline.params["pi_W1"].shape == (40, 200)
        assert "enc_W" not in baseline.params

    def test_emergent_shapes(self):
        cont = init_params(np.random.default_rng(0), "emergent_continuous")
        assert cont.params["pi_W3"].shape == (100, 3 + EMERGENT_MSG_DIM)
        assert cont.params["log_std"].shape == (3 + EMERGENT_MSG_DIM,)
        sel = init_params(np.random.default_rng(0), "emergent_select")
        assert sel.params["pi_W3"].shape == (100, 3 + 12)
        assert sel.params["log_std"].shape == (3,)


class TestEncodeMessages:
    def test_zero_messages_gives_tanh_bias(self):
        params = init_params(np.random.default_rng(1), "v2v")
        params.params["enc_b"] = np.random.default_rng(2).normal(size=32)
        slots = messages_to_slots([], params.max_senders)
        code = encode_messages(params, slots)
        np.testing.assert_allclose(code[0], np.tanh(params.params["enc_b"]), atol=1e-15)

    def test_code_width_32(self):
        params = init_params(np.random.default_rng(1), "v2v")
        msgs = [np.arange(21.0) for _ in range(5)]
        code = encode_messages(params, messages_to_slots(msgs, 11))
        assert code.shape == (1, MSG_CODE_DIM)

    def test_slot_width_for_twelve_cars(self):
        assert messages_to_slots([], 11).shape == (231,)

    def test_too_many_messages(self):
        with pytest.raises(ContractError):
            messages_to_slots([np.zeros(21)] * 12, 11)

    def test_wrong_message_width(self):
        with pytest.raises(ContractError):
            messages_to_slots([np.zeros(20)], 11)


class TestForward:
    def test_bias_only_network(self):
        params = init_params(np.random.default_rng(0), "baseline")
        for key in list(params.params):
            if key.endswith(("W1", "W2", "W3")):
                params.params[key] = np.zeros_like(params.params[key])
        params.params["pi_b3"] = np.array([0.1, -0.2, 0.3])
        params.params["v_b3"] = np.array([1.5])
        mean, value = forward(params, np.random.default_rng(1).normal(size=(4, 40)))
        np.testing.assert_allclose(mean, np.tile([0.1, -0.2, 0.3], (4, 1)), atol=1e-15)
        np.testing.assert_allclose(value, 1.5, atol=1e-15)

    def test_finite_for_large_inputs(self):
        params = init_params(np.random.default_rng(0), "v2v")
        obs = np.full((2, 40), 1e3)
        slots = np.full((2, params.slot_dim), 1e3)
        mean, value = forward(params, obs, slots)
        assert np.all(np.isfinite(mean)) and np.all(np.isfinite(value))

    def test_input_widths(self):
        baseline = init_params(np.random.default_rng(0), "baseline")
        assert baseline.input_dim == 40
        comm = init_params(np.random.default_rng(0), "v2v")
        assert comm.input_dim == 72

    def test_comm_mode_requires_slots(self):
        params = init_params(np.random.default_rng(0), "v2v")
        with pytest.raises(ContractError):
            forward(params, np.zeros((1, 40)), None)

    def test_batched_equals_per_sample(self):
        params = init_params(np.random.default_rng(4), "v2v")
        rng = np.random.default_rng(5)
        obs = rng.normal(size=(8, 40))
        slots = rng.normal(size=(8, params.slot_dim))
        mean_b, value_b = forward(params, obs, slots)
        for i in range(8):
            m, v = forward(params, obs[i : i + 1], slots[i : i + 1])
            np.testing.assert_allclose(m[0], mean_b[i], atol=1e-12)
            np.testing.assert_allclose(v[0], value_b[i], atol=1e-12)


class TestDistribution:
    def test_log_prob_at_mean_unit_sigma(self):
        mean = np.array([[0.3, -1.0, 2.0]])
        _, logp = sample_action(mean, np.zeros(3), np.random.default_rng(0))
        lp = pol.gaussian_log_prob(mean, np.zeros(3), mean)
        assert lp[0] == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-12)

    def test_entropy_unit_sigma(self):
        assert gaussian_entropy(np.zeros(3)) == pytest.approx(3 * 0.5 * math.log(2 * math.pi * math.e), abs=1e-12)

    def test_matches_high_precision_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            mean = rng.normal(size=3)
            log_std = rng.uniform(-2, 1, 3)
            action = rng.normal(size=3)
            got = pol.gaussian_log_prob(mean[None], log_std, action[None])[0]
            want = gaussian_log_prob_oracle(mean, log_std, action)
            assert got == pytest.approx(want, abs=1e-12)

    def test_sampling_deterministic_per_seed(self):
        mean = np.zeros((5, 3))
        a1, _ = sample_action(mean, np.zeros(3), np.random.default_rng(9))
        a2, _ = sample_action(mean, np.zeros(3), np.random.default_rng(9))
        np.testing.assert_array_equal(a1, a2)

    @pytest.mark.parametrize("mode", pol.MODES)
    def test_sample_consistent_with_log_prob_entropy(self, mode):
        params = init_params(np.random.default_rng(1), mode)
        rng = np.random.default_rng(2)
        obs = rng.normal(size=(6, 40))
        slots = rng.normal(size=(6, params.slot_dim)) if pol.uses_comm(mode) else None
        head_out, _ = forward(params, obs, slots)
        actions, logp = sample(params, head_out, rng)
        logp2, _ = log_prob_entropy(params, obs, slots, actions)
        np.testing.assert_allclose(logp, logp2, atol=1e-12)

    def test_log_std_clamped(self):
        params = init_params(np.random.default_rng(1), "baseline")
        params.params["log_std"][:] = [-10.0, 0.0, 10.0]
        np.testing.assert_array_equal(clamped_log_std(params), [-5.0, 0.0, 2.0])


class TestBackward:
    def gradcheck(self, mode, policy_coef, value_coef, entropy_coef, n_coords=200, seed=0):
        rng = np.random.default_rng(seed)
        params = init_params(rng, mode, max_senders=3)
        # Non-trivial parameter point: perturb biases and log-std.
        for key in params.params:
            params.params[key] = params.params[key] + rng.normal(0.0, 0.05, params.params[key].shape)
        batch = make_batch(params, 16, rng)

        def loss_fn():
            loss, _, _ = loss_and_grads(
                params, batch, 0.2, value_coef, entropy_coef, policy_coef, want_grads=False
            )
            return loss

        _, grads, _ = loss_and_grads(params, batch, 0.2, value_coef, entropy_coef, policy_coef)
        keys = sorted(params.params)
        max_rel = 0.0
        checked = 0
        while checked < n_coords:
            key = keys[int(rng.integers(len(keys)))]
            idx = tuple(int(rng.integers(s)) for s in params.params[key].shape)
            fd = finite_difference(loss_fn, params.params, key, idx)
            an = grads[key][idx]
            if abs(fd) < 1e-10 and abs(an) < 1e-10:
                checked += 1
                continue
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            max_rel = max(max_rel, rel)
            checked += 1
        return max_rel

    def test_policy_loss_gradients(self):
        assert self.gradcheck("v2v", 1.0, 0.0, 0.0) < 1e-4

    def test_value_loss_gradients(self):
        assert self.gradcheck("v2v", 0.0, 0.5, 0.0) < 1e-4

    def test_entropy_gradients(self):
        assert self.gradcheck("emergent_select", 0.0, 0.0, 0.01) < 1e-4

    def test_combined_loss_gradients_baseline(self):
        assert self.gradcheck("baseline", 1.0, 0.5, 0.01) < 1e-4

    def test_combined_loss_gradients_emergent(self):
        assert self.gradcheck("emergent_continuous", 1.0, 0.5, 0.01, seed=2) < 1e-4

    def test_constant_loss_zero_gradients(self):
        rng = np.random.default_rng(1)
        params = init_params(rng, "baseline")
        batch = make_batch(params, 8, rng)
        _, grads, _ = loss_and_grads(params, batch, 0.2, 0.0, 0.0, 0.0)
        for g in grads.values():
            np.testing.assert_array_equal(g, 0.0)

    def test_log_std_gradient_at_mean_action(self):
        # action == mean makes dlogp/dlog_std = -1 per dim; with ratio=1 and
        # advantage A the policy-term gradient is A/N per sample summed.
        rng = np.random.default_rng(2)
        params = init_params(rng, "baseline")
        obs = rng.normal(size=(4, 40))
        head_out, values = forward(params, obs)
        logp, _ = log_prob_entropy(params, obs, None, head_out)
        adv = np.array([1.0, -2.0, 0.5, 3.0])
        batch = {
            "obs": obs,
            "actions": head_out.copy(),
            "old_logp": logp,
            "advantages": adv,
            "returns": values.copy(),
        }
        _, grads, _ = loss_and_grads(params, batch, 0.2, 0.0, 0.0, 1.0)
        expected = np.full(3, adv.mean())  # -(1/N) sum A * (-1)
        np.testing.assert_allclose(grads["log_std"], expected, atol=1e-12)

    def test_empty_batch_rejected(self):
        params = init_params(np.random.default_rng(0), "baseline")
        with pytest.raises(ContractError):
            loss_and_grads(params, {"obs": np.zeros((0, 40)), "actions": np.zeros((0, 3)),
                                    "old_logp": np.zeros(0), "advantages": np.zeros(0),
                                    "returns": np.zeros(0)})

    def test_nonfinite_raises_training_error(self):
        rng = np.random.default_rng(3)
        params = init_params(rng, "baseline")
        batch = make_batch(params, 4, rng)
        batch["returns"][0] = np.nan
        with pytest.raises(TrainingError):
            loss_and_grads(params, batch)


class TestCheckpoints:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(7)
        params = init_params(rng, "v2v", max_senders=5)
        path = tmp_path / "ck.npz"
        save_checkpoint(path, params, rng_state={"note": 1})
        loaded, rng_state = load_checkpoint(path)
        assert rng_state == {"note": 1}
        assert loaded.mode == "v2v" and loaded.max_senders == 5
        for key in params.params:
            np.testing.assert_array_equal(loaded.params[key], params.params[key])
        obs = rng.normal(size=(3, 40))
        slots = rng.normal(size=(3, params.slot_dim))
        np.testing.assert_array_equal(forward(params, obs, slots)[0], forward(loaded, obs, slots)[0])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.npz")

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.npz"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
