"""Shared Gaussian policy and value networks, written on numpy.

Architecture: optional message encoder (concatenated messages -> tanh
projection to 32 units), then separate policy and value trunks of two tanh
layers (200, 100) with linear heads. Gradients are computed analytically
for this fixed architecture.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .protocol import MSG_DIM, OBS_DIM
from .simulation import ContractError

MSG_CODE_DIM = 32
HIDDEN = (200, 100)
N_DRIVE_ACTIONS = 3  # acceleration, steering, brake
EMERGENT_MSG_DIM = 8  # continuous mode: message actions per car
N_MASK_BITS = 12  # select mode: one logit per logical message field
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HEAD_SCALE = 0.01

MODES = ("baseline", "v2v", "emergent_continuous", "emergent_select")

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Non-finite loss or gradients during optimization."""


def uses_comm(mode: str) -> bool:
    return mode != "baseline"


def n_cont_actions(mode: str) -> int:
    return N_DRIVE_ACTIONS + (EMERGENT_MSG_DIM if mode == "emergent_continuous" else 0)


def n_head_outputs(mode: str) -> int:
    return n_cont_actions(mode) + (N_MASK_BITS if mode == "emergent_select" else 0)


def action_dim(mode: str) -> int:
    # Sampled mask bits are stored alongside the continuous actions.
    return n_head_outputs(mode)


@dataclass
class PolicyParams:
    mode: str
    max_senders: int
    params: dict[str, np.ndarray]
    obs_scale: np.ndarray = field(default_factory=lambda: np.ones(OBS_DIM))
    msg_scale: np.ndarray = field(default_factory=lambda: np.ones(MSG_DIM))

    @property
    def slot_dim(self) -> int:
        return MSG_DIM * self.max_senders

    @property
    def input_dim(self) -> int:
        return OBS_DIM + (MSG_CODE_DIM if uses_comm(self.mode) else 0)

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.mode,
            self.max_senders,
            {k: v.copy() for k, v in self.params.items()},
            self.obs_scale.copy(),
            self.msg_scale.copy(),
        )

    def validate(self) -> None:
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise TrainingError(f"non-finite values in parameter {k!r}")


def _col_norm(rng: np.random.Generator, n_in: int, n_out: int, scale: float) -> np.ndarray:
    """Weight matrix (n_in, n_out) with columns rescaled to `scale` norm."""
    w = rng.standard_normal((n_in, n_out))
    w *= scale / np.linalg.norm(w, axis=0, keepdims=True)
    return w


def init_params(
    rng: np.random.Generator,
    mode: str = "v2v",
    max_senders: int = 11,
    obs_scale: np.ndarray | None = None,
    msg_scale: np.ndarray | None = None,
) -> PolicyParams:
    """Column-norm initialized parameters: unit-norm hidden columns, 0.01
    output heads, zero biases, zero log-std."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    d_in = OBS_DIM + (MSG_CODE_DIM if uses_comm(mode) else 0)
    h1, h2 = HIDDEN
    n_head = n_head_outputs(mode)
    p: dict[str, np.ndarray] = {}
    if uses_comm(mode):
        p["enc_W"] = _col_norm(rng, MSG_DIM * max_senders, MSG_CODE_DIM, 1.0)
        p["enc_b"] = np.zeros(MSG_CODE_DIM)
    for prefix, n_out in (("pi", n_head), ("v", 1)):
        p[f"{prefix}_W1"] = _col_norm(rng, d_in, h1, 1.0)
        p[f"{prefix}_b1"] = np.zeros(h1)
        p[f"{prefix}_W2"] = _col_norm(rng, h1, h2, 1.0)
        p[f"{prefix}_b2"] = np.zeros(h2)
        p[f"{prefix}_W3"] = _col_norm(rng, h2, n_out, HEAD_SCALE)
        p[f"{prefix}_b3"] = np.zeros(n_out)
    p["log_std"] = np.zeros(n_cont_actions(mode))
    pp = PolicyParams(mode, max_senders, p)
    if obs_scale is not None:
        pp.obs_scale = np.asarray(obs_scale, dtype=float)
    if msg_scale is not None:
        pp.msg_scale = np.asarray(msg_scale, dtype=float)
    return pp


def messages_to_slots(
    messages: list[np.ndarray], max_senders: int, scale: np.ndarray | None = None
) -> np.ndarray:
    """Concatenate canonically-ordered messages into the fixed slot vector.

    Absent trailing slots stay zero. More than max_senders messages is a
    contract violation.
    """
    if len(messages) > max_senders:
        raise ContractError(f"got {len(messages)} messages, max_senders={max_senders}")
    slots = np.zeros(MSG_DIM * max_senders)
    for i, msg in enumerate(messages):
        vals = np.asarray(msg, dtype=float)
        if vals.shape != (MSG_DIM,):
            raise ContractError(f"message {i} has shape {vals.shape}, expected ({MSG_DIM},)")
        slots[i * MSG_DIM : (i + 1) * MSG_DIM] = vals * scale if scale is not None else vals
    return slots


def encode_messages(params: PolicyParams, slots: np.ndarray) -> np.ndarray:
    """tanh projection of the slot vector(s) to the 32-dim message code."""
    return np.tanh(np.atleast_2d(slots) @ params.params["enc_W"] + params.params["enc_b"])


def _forward_cached(params: PolicyParams, obs: np.ndarray, slots: np.ndarray | None) -> dict:
    p = params.params
    obs = np.atleast_2d(obs)
    cache: dict = {"obs": obs}
    if uses_comm(params.mode):
        if slots is None:
            raise ContractError(f"mode {params.mode!r} requires a message slot vector")
        slots = np.atleast_2d(slots)
        code = np.tanh(slots @ p["enc_W"] + p["enc_b"])
        x = np.hstack([obs, code])
        cache["slots"], cache["code"] = slots, code
    else:
        x = obs
    if x.shape[1] != params.input_dim:
        raise ContractError(f"input width {x.shape[1]}, expected {params.input_dim}")
    cache["x"] = x
    for prefix in ("pi", "v"):
        h1 = np.tanh(x @ p[f"{prefix}_W1"] + p[f"{prefix}_b1"])
        h2 = np.tanh(h1 @ p[f"{prefix}_W2"] + p[f"{prefix}_b2"])
        out = h2 @ p[f"{prefix}_W3"] + p[f"{prefix}_b3"]
        cache[f"{prefix}_h1"], cache[f"{prefix}_h2"], cache[f"{prefix}_out"] = h1, h2, out
    return cache


def forward(
    params: PolicyParams, obs: np.ndarray, slots: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Head outputs (action means, plus mask logits in select mode) and value."""
    cache = _forward_cached(params, obs, slots)
    return cache["pi_out"], cache["v_out"][:, 0]


def clamped_log_std(params: PolicyParams) -> np.ndarray:
    return np.clip(params.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    z = (action - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * np.log(2.0 * np.pi)


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(0.5 * np.log(2.0 * np.pi * np.e) + log_std))


def sample_action(
    mean: np.ndarray, log_std: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal-Gaussian sample and its log density (unclamped action)."""
    mean = np.atleast_2d(mean)
    std = np.exp(log_std)
    action = mean + std * rng.standard_normal(mean.shape)
    return action, gaussian_log_prob(mean, log_std, action)


def sample(
    params: PolicyParams, head_out: np.ndarray, rng: np.random.Generator, greedy: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Mode-aware action sample from raw head outputs.

    Returns (actions, log_probs); in select mode the 12 sampled mask bits
    are appended to the continuous actions and their Bernoulli log mass is
    included in the log prob. Greedy uses means / thresholded logits with
    the density still evaluated at that point.
    """
    head_out = np.atleast_2d(head_out)
    nc = n_cont_actions(params.mode)
    log_std = clamped_log_std(params)
    mean = head_out[:, :nc]
    if greedy:
        cont = mean.copy()
    else:
        cont = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    logp = gaussian_log_prob(mean, log_std, cont)
    if params.mode == "emergent_select":
        logits = head_out[:, nc:]
        prob = _sigmoid(logits)
        bits = (logits > 0.0).astype(float) if greedy else (rng.random(logits.shape) < prob).astype(float)
        logp = logp + np.sum(bits * logits - _softplus(logits), axis=-1)
        return np.hstack([cont, bits]), logp
    return cont, logp


def log_prob_entropy(
    params: PolicyParams, obs: np.ndarray, slots: np.ndarray | None, actions: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Log density and entropy of the stored actions under current params."""
    head_out, _ = forward(params, obs, slots)
    actions = np.atleast_2d(actions)
    nc = n_cont_actions(params.mode)
    log_std = clamped_log_std(params)
    logp = gaussian_log_prob(head_out[:, :nc], log_std, actions[:, :nc])
    entropy = np.full(logp.shape, gaussian_entropy(log_std))
    if params.mode == "emergent_select":
        logits = head_out[:, nc:]
        bits = actions[:, nc:]
        logp = logp + np.sum(bits * logits - _softplus(logits), axis=-1)
        entropy = entropy + np.sum(_softplus(logits) - _sigmoid(logits) * logits, axis=-1)
    return logp, entropy


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def loss_and_grads(
    params: PolicyParams,
    batch: dict[str, np.ndarray],
    clip_eps: float = 0.2,
    value_coef: float = 0.5,
    entropy_coef: float = 0.01,
    policy_coef: float = 1.0,
    want_grads: bool = True,
) -> tuple[float, dict[str, np.ndarray] | None, dict[str, float]]:
    """PPO clipped-surrogate loss and exact reverse-mode gradients.

    batch keys: obs (N,40), slots (N,S) or absent/None for baseline,
    actions (N,A), old_logp (N,), advantages (N,), returns (N,).
    """
    p = params.params
    obs = np.atleast_2d(batch["obs"])
    slots = batch.get("slots")
    actions = np.atleast_2d(batch["actions"])
    old_logp = np.asarray(batch["old_logp"], dtype=float)
    adv = np.asarray(batch["advantages"], dtype=float)
    ret = np.asarray(batch["returns"], dtype=float)
    n = obs.shape[0]
    if n == 0:
        raise ContractError("empty batch")

    cache = _forward_cached(params, obs, slots)
    head_out, v = cache["pi_out"], cache["v_out"][:, 0]
    nc = n_cont_actions(params.mode)
    raw_ls = p["log_std"]
    ls = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    ls_active = ((raw_ls > LOG_STD_MIN) & (raw_ls < LOG_STD_MAX)).astype(float)
    sigma = np.exp(ls)
    mean = head_out[:, :nc]
    a_cont = actions[:, :nc]
    z = (a_cont - mean) / sigma
    logp = -0.5 * np.sum(z * z, axis=1) - np.sum(ls) - 0.5 * nc * np.log(2.0 * np.pi)
    ent = np.full(n, gaussian_entropy(ls))
    select = params.mode == "emergent_select"
    if select:
        logits = head_out[:, nc:]
        bits = actions[:, nc:]
        prob = _sigmoid(logits)
        logp = logp + np.sum(bits * logits - _softplus(logits), axis=1)
        ent = ent + np.sum(_softplus(logits) - prob * logits, axis=1)

    ratio = np.exp(logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    use_unclipped = unclipped <= clipped
    surrogate = np.where(use_unclipped, unclipped, clipped)
    value_err = v - ret

    policy_loss = -float(np.mean(surrogate))
    value_loss = float(np.mean(value_err**2))
    entropy_mean = float(np.mean(ent))
    loss = policy_coef * policy_loss + value_coef * value_loss - entropy_coef * entropy_mean

    diagnostics = {
        "loss": loss,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy_mean,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
        "approx_kl": float(np.mean((ratio - 1.0) - np.log(ratio))),
    }
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss: {diagnostics}")
    if not want_grads:
        return loss, None, diagnostics

    # dL/d logp per sample, through the clipped min.
    in_window = (ratio > 1.0 - clip_eps) & (ratio < 1.0 + clip_eps)
    dsurr_dratio = np.where(use_unclipped, adv, adv * in_window)
    g_logp = -(policy_coef / n) * dsurr_dratio * ratio

    grads = {k: np.zeros_like(v_) for k, v_ in p.items()}

    d_mean = g_logp[:, None] * (z / sigma)
    grads["log_std"] = (g_logp @ (z * z - 1.0)) * ls_active
    grads["log_std"] += -entropy_coef * ls_active  # entropy bonus term
    if select:
        d_logits = g_logp[:, None] * (bits - prob)
        d_logits += -(entropy_coef / n) * (-prob * (1.0 - prob) * logits)
        d_head = np.hstack([d_mean, d_logits])
    else:
        d_head = d_mean
    d_vout = (value_coef * 2.0 / n) * value_err[:, None]

    dx = np.zeros_like(cache["x"])
    for prefix, d_out in (("pi", d_head), ("v", d_vout)):
        h1, h2 = cache[f"{prefix}_h1"], cache[f"{prefix}_h2"]
        grads[f"{prefix}_W3"] = h2.T @ d_out
        grads[f"{prefix}_b3"] = d_out.sum(axis=0)
        d_pre2 = (d_out @ p[f"{prefix}_W3"].T) * (1.0 - h2 * h2)
        grads[f"{prefix}_W2"] = h1.T @ d_pre2
        grads[f"{prefix}_b2"] = d_pre2.sum(axis=0)
        d_pre1 = (d_pre2 @ p[f"{prefix}_W2"].T) * (1.0 - h1 * h1)
        grads[f"{prefix}_W1"] = cache["x"].T @ d_pre1
        grads[f"{prefix}_b1"] = d_pre1.sum(axis=0)
        dx += d_pre1 @ p[f"{prefix}_W1"].T
    if uses_comm(params.mode):
        code = cache["code"]
        d_pre_e = dx[:, OBS_DIM:] * (1.0 - code * code)
        grads["enc_W"] = cache["slots"].T @ d_pre_e
        grads["enc_b"] = d_pre_e.sum(axis=0)

    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k!r}: {diagnostics}")
    return loss, grads, diagnostics


# --- Checkpoints --------------------------------------------------------------


def save_checkpoint(path, params: PolicyParams, rng_state: dict | None = None) -> None:
    """Versioned container: architecture descriptor, little-endian float64
    tensors, and optionally the training RNG state."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "mode": params.mode,
        "max_senders": params.max_senders,
        "tensors": sorted(params.params),
        "rng_state": rng_state,
    }
    arrays = {f"param/{k}": v.astype("<f8") for k, v in params.params.items()}
    arrays["obs_scale"] = params.obs_scale.astype("<f8")
    arrays["msg_scale"] = params.msg_scale.astype("<f8")
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[PolicyParams, dict | None]:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
            tensors = {k: np.asarray(data[f"param/{k}"], dtype=float) for k in meta["tensors"]}
            params = PolicyParams(
                meta["mode"],
                meta["max_senders"],
                tensors,
                np.asarray(data["obs_scale"], dtype=float),
                np.asarray(data["msg_scale"], dtype=float),
            )
    except (OSError, KeyError, ValueError, json.JSONDecodeError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    return params, meta.get("rng_state")


class CheckpointError(RuntimeError):
    """Checkpoint file missing, corrupt, or wrong version."""
