"""Deterministic 2D highway world.

A straight corridor with exit gaps on one edge, populated by cars driven by
a kinematic bicycle model. All per-episode randomness (layout, fog) comes
from named streams derived from the episode seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    OrientedRect,
    axes_batch,
    corners_batch,
    edges_from_corners,
    overlap_matrix,
    ray_segments_distances,
    rects_intersect,
    segments_cross_batch,
)
from .rng import stream

# Physics and geometry constants (world-level, not per-episode random).
DT = 0.1  # seconds per tick
STEER_LIMIT = 0.6  # rad
STEER_SLEW = 0.15  # rad per tick
ACCEL_LIMIT = 4.0  # m/s^2
BRAKE_DECEL = 8.0  # m/s^2 at full brake
WHEELBASE_RATIO = 0.6  # wheelbase = ratio * car length
SIZE_LENGTH_RANGE = (3.5, 5.5)  # m, class lengths evenly spaced
WIDTH_RATIO = 0.45  # car width = ratio * length
MAX_SPEED_RANGE = (8.0, 14.0)  # m/s, drawn per car
N_RAYS = 18
PATH_HISTORY_LEN = 5  # positions kept
PATH_SAMPLE_EVERY = 5  # ticks between samples
EXIT_WIDTH = 8.0  # m gap along the corridor edge
EXIT_SPAN = (0.6, 0.95)  # exit centers as fractions of corridor length
EXIT_DEPTH_IN = 1.0  # exit region reach inside the corridor, m
EXIT_DEPTH_OUT = 2.0  # exit region reach outside the corridor, m
START_ROWS = 3  # lateral rows of start slots
START_COL_SPACING = 8.0  # m between start columns
START_FIRST_COL = 6.0  # m from corridor start to first column

ACTIVE = "active"
EXITED = "exited"
CRASHED = "crashed"
PASSED_EXIT = "passed_exit"
TIMED_OUT = "timed_out"
TERMINAL_STATUSES = (EXITED, CRASHED, PASSED_EXIT, TIMED_OUT)

SNAPSHOT_VERSION = 1


class ConfigError(ValueError):
    """A HighwayConfig invariant is violated."""


class ContractError(ValueError):
    """An operation precondition is violated."""


@dataclass(frozen=True)
class HighwayConfig:
    num_cars: int = 12
    num_size_classes: int = 5
    num_exits: int = 2
    num_start_positions: int = 15
    length_range: tuple[float, float] = (200.0, 300.0)
    angle_range: tuple[float, float] = (-0.5, 0.5)
    width: float = 16.0
    fog_probability: float = 0.1
    fog_range_factor: float = 0.5
    comm_range: float = math.inf  # inf means unlimited
    max_steps: int = 500
    seed: int = 0
    lidar_range: float = 40.0

    def validate(self) -> None:
        if self.num_cars > self.num_start_positions:
            raise ConfigError("num_cars must be <= num_start_positions (distinct start slots)")
        if not (0.0 <= self.fog_probability <= 1.0):
            raise ConfigError("fog_probability must be in [0, 1]")
        if not (0.0 < self.fog_range_factor <= 1.0):
            raise ConfigError("fog_range_factor must be in (0, 1]")
        if self.length_range[0] <= 0 or self.length_range[0] > self.length_range[1]:
            raise ConfigError("length_range must satisfy 0 < min <= max")
        if self.width <= max(size_class_lengths(self)) * WIDTH_RATIO:
            raise ConfigError("width must exceed the widest vehicle size class")
        if self.num_cars < 1 or self.num_exits < 1 or self.num_size_classes < 1:
            raise ConfigError("num_cars, num_exits, num_size_classes must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.lidar_range <= 0:
            raise ConfigError("lidar_range must be positive")
        if self.comm_range < 0:
            raise ConfigError("comm_range must be nonnegative")


def size_class_lengths(config: HighwayConfig) -> np.ndarray:
    if config.num_size_classes == 1:
        return np.array([SIZE_LENGTH_RANGE[0]])
    return np.linspace(*SIZE_LENGTH_RANGE, config.num_size_classes)


@dataclass(frozen=True)
class Action:
    acceleration_cmd: float
    steering_cmd: float
    brake_cmd: float

    def validate(self) -> None:
        for v in (self.acceleration_cmd, self.steering_cmd, self.brake_cmd):
            if not math.isfinite(v):
                raise ContractError("action components must be finite")


@dataclass(frozen=True)
class ExitRegion:
    """Gap on the corridor's right edge, as an along-track interval."""

    s_min: float
    s_max: float

    @property
    def center(self) -> float:
        return (self.s_min + self.s_max) / 2.0


@dataclass(frozen=True)
class WorldGeometry:
    origin: tuple[float, float]
    length: float
    width: float
    angle: float
    exits: tuple[ExitRegion, ...]

    def to_world(self, local: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        rot = np.array([[c, -s], [s, c]])
        return np.atleast_2d(local) @ rot.T + np.asarray(self.origin)

    def to_local(self, world: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        rot = np.array([[c, -s], [s, c]])
        return (np.atleast_2d(world) - np.asarray(self.origin)) @ rot

    @property
    def corridor(self) -> OrientedRect:
        center = self.to_world(np.array([self.length / 2.0, self.width / 2.0]))[0]
        return OrientedRect(tuple(center), self.length, self.width, self.angle)

    def walls(self) -> np.ndarray:
        """Boundary segments in world coordinates, shape (S, 2, 2).

        The boundary is closed except at the exit gaps on the right
        (local y = 0) edge. Cached after the first call.
        """
        cached = getattr(self, "_walls_cache", None)
        if cached is not None:
            return cached
        L, W = self.length, self.width
        segs_local = [
            [(0.0, W), (L, W)],  # left edge
            [(0.0, 0.0), (0.0, W)],  # start cap
            [(L, 0.0), (L, W)],  # end cap
        ]
        # Right edge with gaps at the exits.
        cursor = 0.0
        for ex in sorted(self.exits, key=lambda e: e.s_min):
            if ex.s_min > cursor:
                segs_local.append([(cursor, 0.0), (ex.s_min, 0.0)])
            cursor = ex.s_max
        if cursor < L:
            segs_local.append([(cursor, 0.0), (L, 0.0)])
        pts = np.array(segs_local)  # (S,2,2) local
        flat = self.to_world(pts.reshape(-1, 2)).reshape(-1, 2, 2)
        object.__setattr__(self, "_walls_cache", flat)
        return flat

    def exit_rect(self, exit_index: int) -> OrientedRect:
        """The exit region as an oriented rectangle straddling the edge."""
        ex = self.exits[exit_index]
        center_local = np.array([ex.center, (EXIT_DEPTH_IN - EXIT_DEPTH_OUT) / 2.0])
        center = self.to_world(center_local)[0]
        return OrientedRect(tuple(center), ex.s_max - ex.s_min, EXIT_DEPTH_IN + EXIT_DEPTH_OUT, self.angle)

    def exit_center_world(self, exit_index: int) -> np.ndarray:
        ex = self.exits[exit_index]
        return self.to_world(np.array([ex.center, 0.0]))[0]


@dataclass
class CarState:
    car_id: int
    position: np.ndarray  # (2,) world frame, m
    velocity: np.ndarray  # (2,) world frame, m/s
    heading: float  # rad
    steering_angle: float  # rad
    acceleration: float  # net longitudinal accel applied last tick, m/s^2
    brake: float  # brake fraction applied last tick
    size_class: int
    length: float
    width: float
    max_speed: float
    assigned_exit: int
    path_history: np.ndarray  # (PATH_HISTORY_LEN, 2), newest first, zero-padded
    status: str = ACTIVE
    steps: int = 0  # ticks survived so far

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))

    @property
    def wheelbase(self) -> float:
        return WHEELBASE_RATIO * self.length

    def body(self) -> OrientedRect:
        return OrientedRect(tuple(self.position), self.length, self.width, self.heading)


@dataclass(frozen=True)
class StepEvent:
    car_id: int
    kind: str  # one of none/exited/crashed/passed_exit/timed_out


@dataclass
class WorldState:
    config: HighwayConfig
    geometry: WorldGeometry
    cars: list[CarState]
    t: int
    fog: bool
    episode_seed: int
    msg_counter: int = 0  # episode-wide monotone message id source

    def active_cars(self) -> list[CarState]:
        return [c for c in self.cars if c.status == ACTIVE]

    def car(self, car_id: int) -> CarState:
        return self.cars[car_id]


def _start_slot_local(config: HighwayConfig, slot: int) -> np.ndarray:
    """Local-frame position of one of the start slots (row-major grid)."""
    row = slot % START_ROWS
    col = slot // START_ROWS
    y = config.width * (row + 1) / (START_ROWS + 1)
    x = START_FIRST_COL + col * START_COL_SPACING
    return np.array([x, y])


def draw_fog(config: HighwayConfig, episode_seed: int) -> bool:
    """Episode-level fog flag from the dedicated fog stream."""
    if config.fog_probability <= 0.0:
        return False
    return bool(stream(episode_seed, "fog").random() < config.fog_probability)


def reset(config: HighwayConfig, episode_seed: int) -> tuple[WorldState, dict[int, np.ndarray]]:
    """Build a fresh episode. All randomness derives from episode_seed."""
    config.validate()
    layout = stream(episode_seed, "layout")

    length = float(layout.uniform(*config.length_range))
    angle = float(layout.uniform(*config.angle_range))
    frac = np.linspace(EXIT_SPAN[0], EXIT_SPAN[1], config.num_exits) if config.num_exits > 1 else np.array([EXIT_SPAN[0]])
    exits = tuple(
        ExitRegion(float(f * length - EXIT_WIDTH / 2.0), float(f * length + EXIT_WIDTH / 2.0)) for f in frac
    )
    geom = WorldGeometry(origin=(0.0, 0.0), length=length, width=config.width, angle=angle, exits=exits)

    slots = layout.choice(config.num_start_positions, size=config.num_cars, replace=False)
    lengths = size_class_lengths(config)
    cars: list[CarState] = []
    for cid in range(config.num_cars):
        size_class = int(layout.integers(config.num_size_classes))
        assigned_exit = int(layout.integers(config.num_exits))
        max_speed = float(layout.uniform(*MAX_SPEED_RANGE))
        initial_speed = float(layout.uniform(0.3, 0.7)) * max_speed
        pos = geom.to_world(_start_slot_local(config, int(slots[cid])))[0]
        car_len = float(lengths[size_class])
        heading_dir = np.array([math.cos(angle), math.sin(angle)])
        cars.append(
            CarState(
                car_id=cid,
                position=pos,
                velocity=initial_speed * heading_dir,
                heading=angle,
                steering_angle=0.0,
                acceleration=0.0,
                brake=0.0,
                size_class=size_class,
                length=car_len,
                width=WIDTH_RATIO * car_len,
                max_speed=max_speed,
                assigned_exit=assigned_exit,
                path_history=np.zeros((PATH_HISTORY_LEN, 2)),
            )
        )

    world = WorldState(
        config=config,
        geometry=geom,
        cars=cars,
        t=0,
        fog=draw_fog(config, episode_seed),
        episode_seed=episode_seed,
    )
    return world, _all_observations(world)


def step_kinematics(car: CarState, action: Action, dt: float = DT) -> CarState:
    """One bicycle-model tick; returns the updated car, inputs clamped."""
    a_cmd = float(np.clip(action.acceleration_cmd, -1.0, 1.0)) * ACCEL_LIMIT
    brake = float(np.clip(action.brake_cmd, 0.0, 1.0))
    steer_target = float(np.clip(action.steering_cmd, -1.0, 1.0)) * STEER_LIMIT

    steer = car.steering_angle + float(np.clip(steer_target - car.steering_angle, -STEER_SLEW, STEER_SLEW))
    net_accel = a_cmd - BRAKE_DECEL * brake
    speed = float(np.clip(car.speed + net_accel * dt, 0.0, car.max_speed))
    heading = car.heading + (speed / car.wheelbase) * math.tan(steer) * dt
    direction = np.array([math.cos(heading), math.sin(heading)])
    position = car.position + speed * dt * direction

    return replace(
        car,
        position=position,
        velocity=speed * direction,
        heading=heading,
        steering_angle=steer,
        acceleration=net_accel,
        brake=brake,
        steps=car.steps + 1,
    )


def _active_body_arrays(world: WorldState):
    """Batched body geometry for the active cars (ids, corners, edges, axes)."""
    active = world.active_cars()
    if not active:
        return [], np.zeros((0, 4, 2)), np.zeros((0, 4, 2, 2)), np.zeros((0, 2, 2))
    centers = np.stack([c.position for c in active])
    lengths = np.array([c.length for c in active])
    widths = np.array([c.width for c in active])
    headings = np.array([c.heading for c in active])
    corners = corners_batch(centers, lengths, widths, headings)
    return [c.car_id for c in active], corners, edges_from_corners(corners), axes_batch(headings)


def lidar_scan(
    car: CarState,
    world: WorldState,
    n_rays: int = N_RAYS,
    max_range: float | None = None,
    fog: bool | None = None,
    segments: np.ndarray | None = None,
) -> np.ndarray:
    """Distances along n_rays bearings, ray 0 along the heading.

    Fog scales the effective range by the configured factor; no-hit rays
    return the effective range. A precomputed obstacle segment array
    (walls plus the other cars' body edges) may be passed in.
    """
    if max_range is None:
        max_range = world.config.lidar_range
    if fog is None:
        fog = world.fog
    effective = max_range * (world.config.fog_range_factor if fog else 1.0)
    bearings = car.heading + 2.0 * math.pi * np.arange(n_rays) / n_rays
    directions = np.stack([np.cos(bearings), np.sin(bearings)], axis=1)
    if segments is None:
        ids, _corners, edges, _axes = _active_body_arrays(world)
        keep = [i for i, cid in enumerate(ids) if cid != car.car_id]
        segments = np.concatenate([world.geometry.walls(), edges[keep].reshape(-1, 2, 2)])
    dists = ray_segments_distances(car.position, directions, segments)
    return np.minimum(dists, effective)


def detect_collisions(world: WorldState) -> list[StepEvent]:
    """Car-car and car-wall overlaps among active cars."""
    ids, corners, edges, axes = _active_body_arrays(world)
    n = len(ids)
    if n == 0:
        return []
    crashed = overlap_matrix(corners, axes).any(axis=1)

    walls = world.geometry.walls()
    centers = corners.mean(axis=1)
    half_l = np.linalg.norm(corners[:, 0] - corners[:, 1], axis=1) / 2.0
    half_w = np.linalg.norm(corners[:, 1] - corners[:, 2], axis=1) / 2.0
    pts = walls.reshape(-1, 2)
    d = pts[None, :, :] - centers[:, None, :]  # (n, 2S, 2)
    u = np.einsum("npd,nd->np", d, axes[:, 0])
    v = np.einsum("npd,nd->np", d, axes[:, 1])
    endpoint_inside = ((np.abs(u) <= half_l[:, None]) & (np.abs(v) <= half_w[:, None])).any(axis=1)
    crossing = segments_cross_batch(edges.reshape(-1, 2, 2), walls).reshape(n, -1).any(axis=1)
    crashed |= endpoint_inside | crossing
    return [StepEvent(cid, CRASHED) for cid, hit in sorted(zip(ids, crashed)) if hit]


def _all_observations(world: WorldState) -> dict[int, np.ndarray]:
    """Observations for every active car with shared segment precomputation."""
    from .protocol import build_personal_observation

    ids, _corners, edges, _axes = _active_body_arrays(world)
    walls = world.geometry.walls()
    obs = {}
    for i, cid in enumerate(ids):
        keep = [j for j in range(len(ids)) if j != i]
        segments = np.concatenate([walls, edges[keep].reshape(-1, 2, 2)]) if keep else walls
        car = world.cars[cid]
        obs[cid] = build_personal_observation(
            car, world, lidar=lidar_scan(car, world, segments=segments)
        )
    return obs


def step(
    world: WorldState, actions: dict[int, Action]
) -> tuple[WorldState, dict[int, np.ndarray], dict[int, float], list[StepEvent]]:
    """Advance the world one tick.

    Takes one action per active car (keyed by car_id). Returns the world,
    observations for cars still active, rewards for the cars that acted,
    and this tick's terminal events.
    """
    active_ids = sorted(c.car_id for c in world.active_cars())
    if sorted(actions.keys()) != active_ids:
        raise ContractError(f"need exactly one action per active car {active_ids}, got {sorted(actions.keys())}")
    for a in actions.values():
        a.validate()

    world.t += 1
    for cid in active_ids:
        car = world.cars[cid]
        updated = step_kinematics(car, actions[cid])
        if world.t % PATH_SAMPLE_EVERY == 0:
            hist = np.roll(car.path_history, 1, axis=0)
            hist[0] = updated.position
            updated = replace(updated, path_history=hist)
        world.cars[cid] = updated

    # Terminal events: crashes take precedence over exits.
    crashes = {e.car_id for e in detect_collisions(world)}
    events: list[StepEvent] = []
    geom = world.geometry
    for cid in active_ids:
        car = world.cars[cid]
        if cid in crashes:
            car.status = CRASHED
            events.append(StepEvent(cid, CRASHED))
            continue
        if rects_intersect(car.body(), geom.exit_rect(car.assigned_exit)):
            car.status = EXITED
            events.append(StepEvent(cid, EXITED))
            continue
        along = float(geom.to_local(car.position)[0, 0])
        if along > geom.exits[car.assigned_exit].s_max:
            car.status = PASSED_EXIT
            events.append(StepEvent(cid, PASSED_EXIT))
    if world.t >= world.config.max_steps:
        for cid in active_ids:
            if world.cars[cid].status == ACTIVE:
                world.cars[cid].status = TIMED_OUT
                events.append(StepEvent(cid, TIMED_OUT))

    bonus = {EXITED: 60.0, CRASHED: -60.0, PASSED_EXIT: -60.0}
    rewards = {cid: -0.5 + bonus.get(world.cars[cid].status, 0.0) for cid in active_ids}
    return world, _all_observations(world), rewards, events


# --- Versioned JSON snapshots -------------------------------------------------


def world_to_json(world: WorldState) -> str:
    def car_doc(c: CarState) -> dict:
        return {
            "car_id": c.car_id,
            "position": c.position.tolist(),
            "velocity": c.velocity.tolist(),
            "heading": c.heading,
            "steering_angle": c.steering_angle,
            "acceleration": c.acceleration,
            "brake": c.brake,
            "size_class": c.size_class,
            "length": c.length,
            "width": c.width,
            "max_speed": c.max_speed,
            "assigned_exit": c.assigned_exit,
            "path_history": c.path_history.tolist(),
            "status": c.status,
            "steps": c.steps,
        }

    doc = {
        "version": SNAPSHOT_VERSION,
        "config": {**world.config.__dict__, "comm_range": (
            "unlimited" if math.isinf(world.config.comm_range) else world.config.comm_range
        )},
        "geometry": {
            "origin": list(world.geometry.origin),
            "length": world.geometry.length,
            "width": world.geometry.width,
            "angle": world.geometry.angle,
            "exits": [[e.s_min, e.s_max] for e in world.geometry.exits],
        },
        "t": world.t,
        "fog": world.fog,
        "episode_seed": world.episode_seed,
        "msg_counter": world.msg_counter,
        "cars": [car_doc(c) for c in world.cars],
    }
    return json.dumps(doc)


def world_from_json(text: str) -> WorldState:
    doc = json.loads(text)
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
    cfg_doc = dict(doc["config"])
    if cfg_doc.get("comm_range") == "unlimited":
        cfg_doc["comm_range"] = math.inf
    cfg_doc["length_range"] = tuple(cfg_doc["length_range"])
    cfg_doc["angle_range"] = tuple(cfg_doc["angle_range"])
    config = HighwayConfig(**cfg_doc)
    g = doc["geometry"]
    geom = WorldGeometry(
        origin=tuple(g["origin"]),
        length=g["length"],
        width=g["width"],
        angle=g["angle"],
        exits=tuple(ExitRegion(*e) for e in g["exits"]),
    )
    cars = []
    for d in doc["cars"]:
        cars.append(
            CarState(
                car_id=d["car_id"],
                position=np.array(d["position"], dtype=float),
                velocity=np.array(d["velocity"], dtype=float),
                heading=d["heading"],
                steering_angle=d["steering_angle"],
                acceleration=d["acceleration"],
                brake=d["brake"],
                size_class=d["size_class"],
                length=d["length"],
                width=d["width"],
                max_speed=d["max_speed"],
                assigned_exit=d["assigned_exit"],
                path_history=np.array(d["path_history"], dtype=float),
                status=d["status"],
                steps=d["steps"],
            )
        )
    return WorldState(
        config=config,
        geometry=geom,
        cars=cars,
        t=doc["t"],
        fog=doc["fog"],
        episode_seed=doc["episode_seed"],
        msg_counter=doc["msg_counter"],
    )
