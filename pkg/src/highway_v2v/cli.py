"""Command line entry point: train, eval, render, protocol-dump."""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import policy as pol
from .evaluation import (
    CONDITIONS,
    DEFAULT_EVAL_EPISODES,
    DEFAULT_SEEDS,
    evaluate,
    report_json,
    report_table,
)
from .policy import CheckpointError, MODES, load_checkpoint
from .ppo import TrainConfig, run_episode, train
from .protocol import (
    WIRE_RECORD_LEN,
    WireError,
    decode_wire,
    message_scale,
    message_to_labeled_dict,
    observation_scale,
)
from .rendering import save_frame
from .rng import stream
from .simulation import Action, ConfigError, HighwayConfig, reset, step

OUT_ROOT_ENV = "HIGHWAY_V2V_OUT"


class CliError(RuntimeError):
    pass


def _default_out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _coerce(value, current):
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(value)
    if isinstance(current, float):
        if value == "unlimited":
            return math.inf
        return float(value)
    if isinstance(current, tuple):
        parts = [float(v) for v in value.split(",")]
        return tuple(parts)
    return value


def _apply_overrides(cfg, overrides: dict[str, str], section: str):
    fields = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    updates = {}
    for key, val in overrides.items():
        if key not in fields:
            raise CliError(f"unknown {section} config key {key!r}")
        updates[key] = _coerce(val, fields[key])
    return dataclasses.replace(cfg, **updates)


def resolve_config(config_path: str | None, overrides: list[str]):
    """defaults < config file < --set flags; unknown keys are errors."""
    env_cfg = HighwayConfig()
    train_cfg = TrainConfig()
    top = {"mode": "v2v", "seed": 0}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        doc = json.loads(path.read_text())
        unknown = set(doc) - {"env", "train", "mode", "seed"}
        if unknown:
            raise CliError(f"unknown config section(s): {sorted(unknown)}")
        env_cfg = _apply_overrides(env_cfg, doc.get("env", {}), "env")
        train_cfg = _apply_overrides(train_cfg, doc.get("train", {}), "train")
        top.update({k: doc[k] for k in ("mode", "seed") if k in doc})

    env_over, train_over = {}, {}
    for item in overrides:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        if key in ("mode", "seed"):
            top[key] = val if key == "mode" else int(val)
        elif key.startswith("env."):
            env_over[key[4:]] = val
        elif key.startswith("train."):
            train_over[key[6:]] = val
        else:
            raise CliError(f"override key {key!r} must be mode, seed, env.<key> or train.<key>")
    env_cfg = _apply_overrides(env_cfg, env_over, "env")
    train_cfg = _apply_overrides(train_cfg, train_over, "train")
    if top["mode"] not in MODES:
        raise CliError(f"mode must be one of {MODES}, got {top['mode']!r}")
    return env_cfg, train_cfg, top["mode"], int(top["seed"])


def _echo_config(env_cfg: HighwayConfig, train_cfg: TrainConfig, mode: str, seed: int) -> dict:
    env_doc = dataclasses.asdict(env_cfg)
    if math.isinf(env_doc["comm_range"]):
        env_doc["comm_range"] = "unlimited"
    env_doc["length_range"] = list(env_doc["length_range"])
    env_doc["angle_range"] = list(env_doc["angle_range"])
    doc = {"mode": mode, "seed": seed, "env": env_doc, "train": dataclasses.asdict(train_cfg)}
    print("resolved config:", json.dumps(doc, indent=2))
    return doc


def cmd_train(args) -> int:
    env_cfg, train_cfg, mode, seed = resolve_config(args.config, args.set)
    if args.mode is not None:
        mode = args.mode
    out_dir = Path(args.out_dir) if args.out_dir else _default_out_root() / f"train-{mode}-seed{seed}"
    doc = _echo_config(env_cfg, train_cfg, mode, seed)
    env_cfg.validate()
    train_cfg.validate()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2))

    def log_fn(row):
        print(
            f"iter {row['iteration']:4d}  episodes {row['episodes']:6d}  "
            f"return {row['mean_return']:8.2f}  success {row['flat_success']:.3f}  "
            f"kl {row.get('approx_kl', 0.0):.4f}"
        )

    train(train_cfg, env_cfg, seed, mode=mode, out_dir=out_dir, log_fn=log_fn)
    print(f"final checkpoint: {out_dir / 'checkpoint_final.npz'}")
    return 0


def cmd_eval(args) -> int:
    env_cfg, _train_cfg, _mode, seed = resolve_config(args.config, args.set)
    params, _ = load_checkpoint(args.checkpoint)
    _echo_config(env_cfg, TrainConfig(), params.mode, seed)
    env_cfg.validate()
    seeds = tuple(args.seeds)
    ranges = args.comm_range if args.comm_range else [None]
    table_rows, json_rows = [], []
    for comm_range in ranges:
        cfg = env_cfg
        label = args.label or params.mode
        if comm_range is not None:
            value = math.inf if comm_range == "unlimited" else float(comm_range)
            cfg = dataclasses.replace(env_cfg, comm_range=value)
            label = f"{label} (range {comm_range})"
        per_seed, mean = evaluate(params, cfg, args.condition, args.episodes, seeds)
        for s, m in zip(seeds, per_seed):
            table_rows.append((f"{label} [seed {s}]", args.condition, m))
        table_rows.append((f"{label} [mean of {len(seeds)}]", args.condition, mean))
        json_rows.append((label, args.condition, mean, per_seed))
    print(report_table(table_rows))
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report_json(json_rows))
        print(f"report written to {args.report}")
    return 0


def cmd_render(args) -> int:
    env_cfg, _train_cfg, mode, seed = resolve_config(args.config, args.set)
    env_cfg.validate()
    out_dir = Path(args.out_dir) if args.out_dir else _default_out_root() / f"render-{args.episode_seed}"
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.checkpoint == "random":
        params = pol.init_params(
            stream(seed, "render-random"),
            mode="baseline",
            max_senders=max(env_cfg.num_cars - 1, 1),
            obs_scale=observation_scale(env_cfg),
            msg_scale=message_scale(env_cfg),
        )
    else:
        params, _ = load_checkpoint(args.checkpoint)
    _echo_config(env_cfg, TrainConfig(), params.mode, seed)

    policy_rng = stream(args.episode_seed, "policy")
    world, obs = reset(env_cfg, args.episode_seed)
    save_frame(world, out_dir / "frame_00000.png")
    all_events = []
    frame = 0
    from .ppo import _policy_inputs

    while world.active_cars():
        ids, obs_mat, slot_mat = _policy_inputs(params, world, obs, None, 0.0, "per_message", {}, {})
        head_out, _values = pol.forward(params, obs_mat, slot_mat)
        actions, _ = pol.sample(params, head_out, policy_rng, greedy=args.checkpoint != "random")
        env_actions = {i: Action(float(a[0]), float(a[1]), float(a[2])) for i, a in zip(ids, actions)}
        world, obs, _rewards, events = step(world, env_actions)
        frame += 1
        save_frame(world, out_dir / f"frame_{frame:05d}.png")
        all_events.extend({"t": world.t, "car_id": e.car_id, "kind": e.kind} for e in events)
    (out_dir / "events.json").write_text(json.dumps({"steps": frame, "events": all_events}, indent=2))
    print(f"wrote {frame + 1} frames and events.json to {out_dir}")
    return 0


def cmd_protocol_dump(args) -> int:
    data = Path(args.file).read_bytes()
    if len(data) % WIRE_RECORD_LEN != 0:
        print(
            f"error: file length {len(data)} is not a multiple of the "
            f"{WIRE_RECORD_LEN}-byte record length",
            file=sys.stderr,
        )
        return 1
    status = 0
    records = []
    for offset in range(0, len(data), WIRE_RECORD_LEN):
        chunk = data[offset : offset + WIRE_RECORD_LEN]
        try:
            msg = decode_wire(chunk)
        except WireError as exc:
            print(f"error at byte offset {offset}: {exc}", file=sys.stderr)
            status = 1
            continue
        records.append(message_to_labeled_dict(msg))
    print(json.dumps(records, indent=2))
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="highway-v2v", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (env.<k>, train.<k>, mode, seed)")

    p = sub.add_parser("train", help="train a policy")
    add_common(p)
    p.add_argument("--mode", choices=MODES, help="policy/communication mode")
    p.add_argument("--out-dir", help="output directory (checkpoints, metrics)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("--condition", choices=CONDITIONS, default="mixed")
    p.add_argument("--episodes", type=int, default=DEFAULT_EVAL_EPISODES)
    p.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_SEEDS))
    p.add_argument("--comm-range", action="append",
                   help="evaluate at this communication range (repeatable; 'unlimited' allowed)")
    p.add_argument("--label", help="model label for the report")
    p.add_argument("--report", help="write a JSON report to this path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="roll one episode and write PNG frames")
    add_common(p)
    p.add_argument("checkpoint", help="checkpoint path, or 'random'")
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("protocol-dump", help="decode wire records to labeled JSON")
    p.add_argument("file", help="file of 176-byte wire records")
    p.set_defaults(fn=cmd_protocol_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
