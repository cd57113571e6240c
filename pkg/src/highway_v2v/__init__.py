"""Multi-agent highway simulator with V2V messaging and a PPO stack."""

from .simulation import (
    Action,
    CarState,
    ConfigError,
    ContractError,
    HighwayConfig,
    StepEvent,
    WorldState,
    detect_collisions,
    lidar_scan,
    reset,
    step,
    step_kinematics,
)
from .protocol import (
    MSG_DIM,
    OBS_DIM,
    BadLengthError,
    BadMagicError,
    ChecksumError,
    WireError,
    apply_field_mask,
    build_personal_observation,
    build_v2v_message,
    decode_wire,
    drop_messages,
    encode_wire,
    gather_messages,
    message_to_labeled_dict,
)
from .policy import PolicyParams, init_params, load_checkpoint, save_checkpoint
from .ppo import RolloutBuffer, TrainConfig, collect_rollouts, compute_gae, ppo_loss, train
from .evaluation import EvalMetrics, evaluate, report_table
from .rendering import render_frame, save_frame

__all__ = [
    "Action",
    "BadLengthError",
    "BadMagicError",
    "CarState",
    "ChecksumError",
    "ConfigError",
    "ContractError",
    "EvalMetrics",
    "HighwayConfig",
    "MSG_DIM",
    "OBS_DIM",
    "PolicyParams",
    "RolloutBuffer",
    "StepEvent",
    "TrainConfig",
    "WorldState",
    "apply_field_mask",
    "build_personal_observation",
    "build_v2v_message",
    "collect_rollouts",
    "compute_gae",
    "decode_wire",
    "detect_collisions",
    "drop_messages",
    "encode_wire",
    "evaluate",
    "gather_messages",
    "init_params",
    "lidar_scan",
    "load_checkpoint",
    "message_to_labeled_dict",
    "ppo_loss",
    "render_frame",
    "report_table",
    "reset",
    "save_frame",
    "step",
    "step_kinematics",
    "train",
    "WireError",
]

__version__ = "0.1.0"
