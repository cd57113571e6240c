"""
Drive a random episode and render it to PNG frames
===================================================

Runs one seeded episode with random steering, prints the terminal
events, and writes a frame per tick under ./frames_demo/.
"""
from pathlib import Path

import numpy as np

from highway_v2v import Action, HighwayConfig, render_frame, reset, step

config = HighwayConfig(num_cars=6, max_steps=150, seed=42)
world, observations = reset(config, episode_seed=7)
print(f"corridor length {world.geometry.length:.1f} m, fog={world.fog}")

out_dir = Path("frames_demo")
out_dir.mkdir(exist_ok=True)
render_frame(world).save(out_dir / "frame_00000.png")

# Random driving: each active car gets noise for accel, steering, brake.
rng = np.random.default_rng(7)
tick = 0
while world.active_cars():
    actions = {c.car_id: Action(*rng.normal(size=3)) for c in world.active_cars()}
    world, observations, rewards, events = step(world, actions)
    tick += 1
    render_frame(world).save(out_dir / f"frame_{tick:05d}.png")
    for event in events:
        print(f"  t={tick:3d}  car {event.car_id}: {event.kind}")

statuses = {c.car_id: c.status for c in world.cars}
print(f"episode over after {tick} ticks: {statuses}")
print(f"wrote {tick + 1} frames to {out_dir}/")
