"""PPO training: per-vehicle rollouts, GAE, clipped surrogate updates.

Each car's trajectory within a multi-car episode is stored and trained on
as an independent episode under the single shared policy.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import policy as pol
from .policy import PolicyParams, TrainingError, loss_and_grads, messages_to_slots
from .protocol import (
    MSG_DIM,
    build_v2v_message,
    drop_messages,
    gather_messages,
    message_scale,
    observation_scale,
)
from .rng import stream
from .simulation import ACTIVE, Action, HighwayConfig, reset, step
from .protocol import apply_field_mask


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    learning_rate: float = 3e-4
    epochs_per_iter: int = 10
    minibatch_size: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    episodes_per_iter: int = 16
    total_episodes: int = 2000
    message_dropout_p: float = 0.1
    dropout_variant: str = "per_message"
    kl_stop: float = 0.05  # early-stop an update phase when KL exceeds this
    checkpoint_every: int = 10  # iterations

    def validate(self) -> None:
        if not (0.0 < self.gamma <= 1.0) or not (0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must be in (0, 1]")
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be positive")
        if not (0.0 <= self.message_dropout_p <= 1.0):
            raise ValueError("message_dropout_p must be in [0, 1]")
        if self.dropout_variant not in ("per_message", "global_step"):
            raise ValueError(f"unknown dropout_variant {self.dropout_variant!r}")


@dataclass
class VehicleEpisode:
    """One car's trajectory, treated as an independent episode."""

    car_id: int
    obs: list[np.ndarray] = field(default_factory=list)
    slots: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    terminal_status: str = ACTIVE

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class RolloutBuffer:
    episodes: list[VehicleEpisode] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.episodes)

    def total_steps(self) -> int:
        return sum(len(e) for e in self.episodes)


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    bootstrap_value: float = 0.0,
    gamma: float = 0.99,
    lam: float = 0.95,
) -> tuple[np.ndarray, np.ndarray]:
    """Backward-recursion generalized advantage estimate and returns."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have equal lengths")
    T = len(rewards)
    adv = np.zeros(T)
    next_value = bootstrap_value
    running = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def _policy_inputs(
    params: PolicyParams,
    world,
    obs: dict[int, np.ndarray],
    dropout_rng: np.random.Generator | None,
    dropout_p: float,
    dropout_variant: str,
    emitted: dict[int, np.ndarray] | None,
    masks: dict[int, np.ndarray] | None,
) -> tuple[list[int], np.ndarray, np.ndarray | None]:
    """Scaled network inputs for every active car, in car-id order."""
    ids = sorted(obs)
    obs_mat = np.stack([obs[i] * params.obs_scale for i in ids])
    if not pol.uses_comm(params.mode):
        return ids, obs_mat, None

    if params.mode == "emergent_continuous":
        # Broadcast last tick's message actions, zero-padded to message width.
        messages = []
        for i in ids:
            m = np.zeros(MSG_DIM)
            m[0] = world.cars[i].car_id
            m[3], m[4] = world.cars[i].position
            if emitted is not None and i in emitted:
                m[5 : 5 + pol.EMERGENT_MSG_DIM] = emitted[i]
            messages.append(m)
    else:
        messages = [build_v2v_message(world.cars[i], world) for i in ids]
        if params.mode == "emergent_select" and masks is not None:
            messages = [apply_field_mask(m, masks.get(int(m[0]), np.ones(12))) for m in messages]

    # Drop per receiver on the gathered set; global_step shares one draw.
    step_drop = None
    if dropout_rng is not None and dropout_variant == "global_step" and dropout_p > 0.0:
        step_drop = bool(dropout_rng.random() < dropout_p)

    slot_rows = []
    for i in ids:
        received = gather_messages(world.cars[i], messages, world.config.comm_range)
        if step_drop is not None:
            received = [] if step_drop else received
        elif dropout_rng is not None:
            received = drop_messages(received, dropout_p, dropout_variant, dropout_rng)
        slot_rows.append(messages_to_slots(received[: params.max_senders], params.max_senders, params.msg_scale))
    return ids, obs_mat, np.stack(slot_rows)


def run_episode(
    params: PolicyParams,
    config: HighwayConfig,
    episode_seed: int,
    greedy: bool = False,
    train_dropout: bool = False,
    dropout_p: float = 0.1,
    dropout_variant: str = "per_message",
) -> list[VehicleEpisode]:
    """Roll one full environment episode, returning per-vehicle episodes."""
    policy_rng = stream(episode_seed, "policy")
    dropout_rng = stream(episode_seed, "dropout") if train_dropout else None
    world, obs = reset(config, episode_seed)
    episodes = {c.car_id: VehicleEpisode(car_id=c.car_id) for c in world.cars}
    emitted: dict[int, np.ndarray] = {}
    masks: dict[int, np.ndarray] = {}

    while world.active_cars():
        ids, obs_mat, slot_mat = _policy_inputs(
            params, world, obs, dropout_rng, dropout_p, dropout_variant, emitted, masks
        )
        head_out, values = pol.forward(params, obs_mat, slot_mat)
        actions, log_probs = pol.sample(params, head_out, policy_rng, greedy=greedy)

        env_actions = {
            i: Action(float(a[0]), float(a[1]), float(a[2])) for i, a in zip(ids, actions)
        }
        world, obs, rewards, _events = step(world, env_actions)

        for row, i in enumerate(ids):
            ep = episodes[i]
            ep.obs.append(obs_mat[row])
            ep.slots.append(slot_mat[row] if slot_mat is not None else np.zeros(0))
            ep.actions.append(actions[row])
            ep.log_probs.append(float(log_probs[row]))
            ep.values.append(float(values[row]))
            ep.rewards.append(rewards[i])
            ep.terminal_status = world.cars[i].status
            if params.mode == "emergent_continuous":
                emitted[i] = actions[row][pol.N_DRIVE_ACTIONS :]
            elif params.mode == "emergent_select":
                masks[i] = actions[row][pol.N_DRIVE_ACTIONS :]
    return [episodes[i] for i in sorted(episodes)]


def collect_rollouts(
    params: PolicyParams,
    config: HighwayConfig,
    n_episodes: int,
    rng: np.random.Generator,
    train_dropout: bool = True,
    dropout_p: float = 0.1,
    dropout_variant: str = "per_message",
) -> RolloutBuffer:
    """n_episodes full episodes split into independent vehicle episodes."""
    buffer = RolloutBuffer()
    for _ in range(n_episodes):
        ep_seed = int(rng.integers(2**63))
        buffer.episodes.extend(
            run_episode(
                params,
                config,
                ep_seed,
                train_dropout=train_dropout,
                dropout_p=dropout_p,
                dropout_variant=dropout_variant,
            )
        )
    return buffer


def flatten_buffer(buffer: RolloutBuffer, gamma: float, lam: float) -> dict[str, np.ndarray]:
    """GAE per vehicle episode, then one flat training batch."""
    obs, slots, actions, logp, adv, ret = [], [], [], [], [], []
    for ep in buffer.episodes:
        if len(ep) == 0:
            continue
        a, r = compute_gae(np.array(ep.rewards), np.array(ep.values), 0.0, gamma, lam)
        obs.extend(ep.obs)
        slots.extend(ep.slots)
        actions.extend(ep.actions)
        logp.extend(ep.log_probs)
        adv.append(a)
        ret.append(r)
    slots_arr = np.stack(slots)
    return {
        "obs": np.stack(obs),
        "slots": slots_arr if slots_arr.shape[1] > 0 else None,
        "actions": np.stack(actions),
        "old_logp": np.array(logp),
        "advantages": np.concatenate(adv),
        "returns": np.concatenate(ret),
    }


def normalize_advantages(adv: np.ndarray, std_floor: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / max(adv.std(), std_floor)


class Adam:
    """First-order adaptive-moment optimizer over a parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        if lr == 0.0:
            return
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)


def ppo_loss(
    params: PolicyParams,
    minibatch: dict[str, np.ndarray],
    clip_eps: float = 0.2,
    value_coef: float = 0.5,
    entropy_coef: float = 0.01,
) -> tuple[float, dict[str, float]]:
    loss, _, diag = loss_and_grads(
        params, minibatch, clip_eps, value_coef, entropy_coef, want_grads=False
    )
    return loss, diag


def _episode_stats(buffer: RolloutBuffer) -> dict[str, float]:
    returns = [sum(ep.rewards) for ep in buffer.episodes if len(ep)]
    successes = [1.0 if ep.terminal_status == "exited" else 0.0 for ep in buffer.episodes if len(ep)]
    return {
        "mean_return": float(np.mean(returns)) if returns else 0.0,
        "flat_success": float(np.mean(successes)) if successes else 0.0,
        "mean_length": float(np.mean([len(ep) for ep in buffer.episodes if len(ep)])) if returns else 0.0,
    }


def train(
    train_cfg: TrainConfig,
    env_cfg: HighwayConfig,
    seed: int,
    mode: str = "v2v",
    out_dir: str | Path | None = None,
    log_fn=None,
) -> tuple[PolicyParams, list[dict]]:
    """Full optimization loop; returns final params and per-iteration metrics.

    Writes checkpoints and a JSON-lines metrics log under out_dir when given.
    """
    train_cfg.validate()
    env_cfg.validate()
    init_rng = stream(seed, "init")
    episode_rng = stream(seed, "episodes")
    sgd_rng = stream(seed, "sgd")

    params = pol.init_params(
        init_rng,
        mode=mode,
        max_senders=max(env_cfg.num_cars - 1, 1),
        obs_scale=observation_scale(env_cfg),
        msg_scale=message_scale(env_cfg),
    )
    optimizer = Adam(params.params)
    metrics: list[dict] = []

    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = (out_path / "metrics.jsonl").open("w")

    n_iters = train_cfg.total_episodes // train_cfg.episodes_per_iter
    episodes_done = 0
    for it in range(n_iters):
        t0 = time.time()
        buffer = collect_rollouts(
            params,
            env_cfg,
            train_cfg.episodes_per_iter,
            episode_rng,
            train_dropout=pol.uses_comm(mode),
            dropout_p=train_cfg.message_dropout_p,
            dropout_variant=train_cfg.dropout_variant,
        )
        episodes_done += train_cfg.episodes_per_iter
        batch = flatten_buffer(buffer, train_cfg.gamma, train_cfg.gae_lambda)
        batch["advantages"] = normalize_advantages(batch["advantages"])
        n = batch["obs"].shape[0]

        diag_last: dict[str, float] = {}
        stop = False
        for _epoch in range(train_cfg.epochs_per_iter):
            order = sgd_rng.permutation(n)
            for lo in range(0, n, train_cfg.minibatch_size):
                idx = order[lo : lo + train_cfg.minibatch_size]
                mb = {
                    "obs": batch["obs"][idx],
                    "slots": batch["slots"][idx] if batch["slots"] is not None else None,
                    "actions": batch["actions"][idx],
                    "old_logp": batch["old_logp"][idx],
                    "advantages": batch["advantages"][idx],
                    "returns": batch["returns"][idx],
                }
                _, grads, diag_last = loss_and_grads(
                    params, mb, train_cfg.clip_eps, train_cfg.value_coef, train_cfg.entropy_coef
                )
                optimizer.step(params.params, grads, train_cfg.learning_rate)
                if diag_last["approx_kl"] > train_cfg.kl_stop:
                    stop = True
                    break
            if stop:
                break

        row = {
            "iteration": it,
            "episodes": episodes_done,
            "batch_steps": n,
            **_episode_stats(buffer),
            **diag_last,
            "kl_early_stop": stop,
            "seconds": time.time() - t0,
        }
        metrics.append(row)
        if log_fn is not None:
            log_fn(row)
        if log_file is not None:
            log_file.write(json.dumps(row) + "\n")
            log_file.flush()
        if out_path is not None and (it + 1) % train_cfg.checkpoint_every == 0:
            pol.save_checkpoint(out_path / f"checkpoint_{it + 1:05d}.npz", params)

    if out_path is not None:
        pol.save_checkpoint(
            out_path / "checkpoint_final.npz",
            params,
            rng_state=episode_rng.bit_generator.state,
        )
        if log_file is not None:
            log_file.close()
    return params, metrics
