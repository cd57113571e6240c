"""Multi-seed evaluation and the safety/speed report tables."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .policy import PolicyParams
from .ppo import run_episode
from .rng import stream
from .simulation import EXITED, HighwayConfig

CONDITIONS = ("sunny", "foggy", "mixed")
TABLE_COLUMNS = (
    "Model",
    "Eval Conditions",
    "Flat Success",
    "Episode Success",
    "Mean Length Success",
    "Mean Length Fail",
)
DEFAULT_EVAL_EPISODES = 500
DEFAULT_SEEDS = (0, 1, 2)


@dataclass
class EvalMetrics:
    flat_success: float
    episode_success: float
    mean_len_success: float | None  # None when no car succeeded / failed
    mean_len_fail: float | None
    n_episodes: int
    condition: str

    def validate(self) -> None:
        assert 0.0 <= self.flat_success <= 1.0
        assert 0.0 <= self.episode_success <= 1.0
        assert self.episode_success <= self.flat_success + 1e-12


def condition_config(config: HighwayConfig, condition: str) -> HighwayConfig:
    """Fog probability forced by the evaluation condition."""
    if condition == "sunny":
        return dataclasses.replace(config, fog_probability=0.0)
    if condition == "foggy":
        return dataclasses.replace(config, fog_probability=1.0)
    if condition == "mixed":
        return config
    raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")


def evaluate(
    params: PolicyParams,
    config: HighwayConfig,
    condition: str = "mixed",
    n_episodes: int = DEFAULT_EVAL_EPISODES,
    seeds: tuple[int, ...] = DEFAULT_SEEDS,
) -> tuple[list[EvalMetrics], EvalMetrics]:
    """Greedy-policy metrics per seed, plus their average.

    Dropout is off; actions are the Gaussian means. Each seed drives an
    independent stream of episode seeds.
    """
    cfg = condition_config(config, condition)
    per_seed = []
    for seed in seeds:
        ep_rng = stream(seed, "eval-episodes")
        lengths_success: list[int] = []
        lengths_fail: list[int] = []
        n_episode_success = 0
        for _ in range(n_episodes):
            episodes = run_episode(params, cfg, int(ep_rng.integers(2**63)), greedy=True)
            ok = [ep.terminal_status == EXITED for ep in episodes]
            for ep, good in zip(episodes, ok):
                (lengths_success if good else lengths_fail).append(len(ep))
            if all(ok):
                n_episode_success += 1
        n_cars = len(lengths_success) + len(lengths_fail)
        m = EvalMetrics(
            flat_success=len(lengths_success) / n_cars,
            episode_success=n_episode_success / n_episodes,
            mean_len_success=float(np.mean(lengths_success)) if lengths_success else None,
            mean_len_fail=float(np.mean(lengths_fail)) if lengths_fail else None,
            n_episodes=n_episodes,
            condition=condition,
        )
        m.validate()
        per_seed.append(m)

    def avg(vals):
        known = [v for v in vals if v is not None]
        return float(np.mean(known)) if known else None

    mean = EvalMetrics(
        flat_success=avg([m.flat_success for m in per_seed]),
        episode_success=avg([m.episode_success for m in per_seed]),
        mean_len_success=avg([m.mean_len_success for m in per_seed]),
        mean_len_fail=avg([m.mean_len_fail for m in per_seed]),
        n_episodes=n_episodes * len(seeds),
        condition=condition,
    )
    return per_seed, mean


def _fmt(value, decimals: int) -> str:
    if value is None:
        return "-"
    return f"{value:.{decimals}f}"


def report_table(rows: list[tuple[str, str, EvalMetrics]]) -> str:
    """Fixed-width text table with the six safety/speed metric columns."""
    cells = [list(TABLE_COLUMNS)]
    for label, condition, m in rows:
        cells.append(
            [
                label,
                condition.capitalize(),
                _fmt(m.flat_success, 4),
                _fmt(m.episode_success, 4),
                _fmt(m.mean_len_success, 1),
                _fmt(m.mean_len_fail, 1),
            ]
        )
    widths = [max(len(row[i]) for row in cells) for i in range(len(TABLE_COLUMNS))]
    lines = []
    for r, row in enumerate(cells):
        lines.append(" | ".join(c.ljust(w) for c, w in zip(row, widths)))
        if r == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def report_json(rows: list[tuple[str, str, EvalMetrics, list[EvalMetrics] | None]]) -> str:
    """Machine-readable report with optional per-seed breakdown."""
    doc = []
    for label, condition, mean, per_seed in rows:
        entry = {
            "model": label,
            "eval_conditions": condition,
            "average": dataclasses.asdict(mean),
        }
        if per_seed is not None:
            entry["per_seed"] = [dataclasses.asdict(m) for m in per_seed]
        doc.append(entry)
    return json.dumps(doc, indent=2)
