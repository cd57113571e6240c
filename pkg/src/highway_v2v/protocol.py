"""Per-car observation vector and the V2V safety message.

The observation is a fixed 40-scalar layout; the safety message is a fixed
21-scalar layout with a bit-exact binary wire form (176-byte records).
"""
from __future__ import annotations

import math
import struct
import zlib

import numpy as np

from .simulation import CarState, HighwayConfig, WorldState, lidar_scan

OBS_DIM = 40
MSG_DIM = 21
N_LOGICAL_FIELDS = 12
WIRE_MAGIC = b"V2V1"
WIRE_RECORD_LEN = 4 + MSG_DIM * 8 + 4  # magic + doubles + crc32 = 176

HARD_BRAKE_THRESHOLD = 0.5

# Observation slot layout (zero-based slices).
OBS_FIELDS = {
    "exit_position": slice(0, 2),
    "max_speed": slice(2, 3),
    "velocity": slice(3, 5),
    "current_position": slice(5, 7),
    "steering_wheel_angle": slice(7, 8),
    "size": slice(8, 9),
    "acceleration": slice(9, 10),
    "car_angle": slice(10, 11),
    "time": slice(11, 12),
    "path_history": slice(12, 22),
    "lidar": slice(22, 40),
}

# Message slot layout: 12 logical fields over 21 scalars.
MSG_FIELDS = {
    "car_id": slice(0, 1),
    "global_message_id": slice(1, 2),
    "episode_time_step": slice(2, 3),
    "pos_x": slice(3, 4),
    "pos_y": slice(4, 5),
    "speed": slice(5, 6),
    "car_angle": slice(6, 7),
    "acceleration": slice(7, 8),
    "path_history": slice(8, 18),
    "hard_brake_indicator": slice(18, 19),
    "steering_wheel_angle": slice(19, 20),
    "car_size": slice(20, 21),
}
MSG_FIELD_NAMES = tuple(MSG_FIELDS)


class WireError(ValueError):
    """Base class for wire decoding failures."""


class BadMagicError(WireError):
    pass


class BadLengthError(WireError):
    pass


class ChecksumError(WireError):
    pass


def build_personal_observation(
    car: CarState, world: WorldState, lidar: np.ndarray | None = None
) -> np.ndarray:
    """The 40-scalar policy input for one active car."""
    obs = np.empty(OBS_DIM)
    obs[OBS_FIELDS["exit_position"]] = world.geometry.exit_center_world(car.assigned_exit)
    obs[OBS_FIELDS["max_speed"]] = car.max_speed
    obs[OBS_FIELDS["velocity"]] = car.velocity
    obs[OBS_FIELDS["current_position"]] = car.position
    obs[OBS_FIELDS["steering_wheel_angle"]] = car.steering_angle
    obs[OBS_FIELDS["size"]] = car.length
    obs[OBS_FIELDS["acceleration"]] = car.acceleration
    obs[OBS_FIELDS["car_angle"]] = car.heading
    obs[OBS_FIELDS["time"]] = world.t / world.config.max_steps
    obs[OBS_FIELDS["path_history"]] = car.path_history.ravel()
    obs[OBS_FIELDS["lidar"]] = lidar_scan(car, world) if lidar is None else lidar
    return obs


def build_v2v_message(car: CarState, world: WorldState) -> np.ndarray:
    """The 21-scalar safety message for one active car.

    State fields describe the car as of the last completed tick; the hard
    brake flag reflects the previously applied brake action. Consumes one
    id from the world's episode-wide message counter.
    """
    msg = np.empty(MSG_DIM)
    msg[MSG_FIELDS["car_id"]] = car.car_id
    msg[MSG_FIELDS["global_message_id"]] = world.msg_counter
    world.msg_counter += 1
    msg[MSG_FIELDS["episode_time_step"]] = world.t
    msg[MSG_FIELDS["pos_x"]] = car.position[0]
    msg[MSG_FIELDS["pos_y"]] = car.position[1]
    msg[MSG_FIELDS["speed"]] = car.speed
    msg[MSG_FIELDS["car_angle"]] = car.heading
    msg[MSG_FIELDS["acceleration"]] = car.acceleration
    msg[MSG_FIELDS["path_history"]] = car.path_history.ravel()
    msg[MSG_FIELDS["hard_brake_indicator"]] = 1.0 if car.brake > HARD_BRAKE_THRESHOLD else 0.0
    msg[MSG_FIELDS["steering_wheel_angle"]] = car.steering_angle
    msg[MSG_FIELDS["car_size"]] = car.length
    return msg


def gather_messages(
    receiver: CarState, all_messages: list[np.ndarray], comm_range: float = math.inf
) -> list[np.ndarray]:
    """Messages from other senders within comm_range of the receiver.

    Output is ordered by ascending sender distance, ties broken by car id,
    so it is independent of the input ordering.
    """
    keyed = []
    for msg in all_messages:
        sender_id = int(msg[0])
        if sender_id == receiver.car_id:
            continue
        pos = np.array([msg[3], msg[4]])
        dist = float(np.hypot(*(pos - receiver.position)))
        if dist <= comm_range:
            keyed.append((dist, sender_id, msg))
    keyed.sort(key=lambda k: (k[0], k[1]))
    return [m for _, _, m in keyed]


def drop_messages(
    messages: list[np.ndarray],
    p: float = 0.1,
    variant: str = "per_message",
    rng: np.random.Generator | None = None,
) -> list[np.ndarray]:
    """Randomly discard messages during training.

    per_message drops each message independently with probability p;
    global_step drops either every message or none, with probability p.
    """
    if not (0.0 <= p <= 1.0):
        raise ValueError("drop probability must be in [0, 1]")
    if p == 0.0 or not messages:
        return list(messages)
    if rng is None:
        rng = np.random.default_rng()
    if variant == "per_message":
        keep = rng.random(len(messages)) >= p
        return [m for m, k in zip(messages, keep) if k]
    if variant == "global_step":
        return [] if rng.random() < p else list(messages)
    raise ValueError(f"unknown dropout variant {variant!r}")


def encode_wire(msg: np.ndarray) -> bytes:
    """Fixed-layout record: magic, 21 little-endian doubles, CRC-32."""
    msg = np.asarray(msg, dtype=float)
    if msg.shape != (MSG_DIM,):
        raise ValueError(f"message must have exactly {MSG_DIM} scalars")
    payload = struct.pack(f"<{MSG_DIM}d", *msg)
    return WIRE_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def decode_wire(data: bytes) -> np.ndarray:
    if len(data) != WIRE_RECORD_LEN:
        raise BadLengthError(f"expected {WIRE_RECORD_LEN} bytes, got {len(data)}")
    if data[:4] != WIRE_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    payload = data[4:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("CRC mismatch")
    return np.array(struct.unpack(f"<{MSG_DIM}d", payload))


def apply_field_mask(msg: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out the deselected logical fields; the width stays 21."""
    mask = np.asarray(mask)
    if mask.shape != (N_LOGICAL_FIELDS,):
        raise ValueError(f"mask must have exactly {N_LOGICAL_FIELDS} entries")
    out = np.array(msg, dtype=float, copy=True)
    for keep, name in zip(mask, MSG_FIELD_NAMES):
        if not keep:
            out[MSG_FIELDS[name]] = 0.0
    return out


def message_to_labeled_dict(msg: np.ndarray) -> dict[str, list[float] | float]:
    """Field-labeled view of a decoded message, in wire order."""
    out: dict[str, list[float] | float] = {}
    for name in MSG_FIELD_NAMES:
        vals = msg[MSG_FIELDS[name]]
        out[name] = float(vals[0]) if vals.size == 1 else [float(v) for v in vals]
    return out


# --- Input scaling for the policy network ------------------------------------
# The raw tables carry meters and meter-scale path history; the network gets
# a fixed per-dimension rescaling so tanh units do not saturate.

MAX_SPEED_UPPER = 14.0


def observation_scale(config: HighwayConfig) -> np.ndarray:
    s = np.ones(OBS_DIM)
    pos = 1.0 / config.length_range[1]
    s[OBS_FIELDS["exit_position"]] = pos
    s[OBS_FIELDS["max_speed"]] = 1.0 / MAX_SPEED_UPPER
    s[OBS_FIELDS["velocity"]] = 1.0 / MAX_SPEED_UPPER
    s[OBS_FIELDS["current_position"]] = pos
    s[OBS_FIELDS["size"]] = 0.2
    s[OBS_FIELDS["acceleration"]] = 0.1
    s[OBS_FIELDS["path_history"]] = pos
    s[OBS_FIELDS["lidar"]] = 1.0 / config.lidar_range
    return s


def message_scale(config: HighwayConfig) -> np.ndarray:
    s = np.ones(MSG_DIM)
    pos = 1.0 / config.length_range[1]
    s[MSG_FIELDS["car_id"]] = 1.0 / max(config.num_cars, 1)
    s[MSG_FIELDS["global_message_id"]] = 1.0 / (config.max_steps * max(config.num_cars, 1))
    s[MSG_FIELDS["episode_time_step"]] = 1.0 / config.max_steps
    s[MSG_FIELDS["pos_x"]] = pos
    s[MSG_FIELDS["pos_y"]] = pos
    s[MSG_FIELDS["speed"]] = 1.0 / MAX_SPEED_UPPER
    s[MSG_FIELDS["acceleration"]] = 0.1
    s[MSG_FIELDS["path_history"]] = pos
    s[MSG_FIELDS["car_size"]] = 0.2
    return s
