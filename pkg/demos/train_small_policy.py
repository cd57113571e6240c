"""
Train a small driving policy and evaluate it
============================================

A scaled-down run: one car in a short corridor, 200 episodes of PPO,
then a greedy evaluation against the standard three-seed report table.
Takes about half a minute on a laptop CPU.
"""
from highway_v2v import HighwayConfig, TrainConfig, evaluate, report_table, train

env = HighwayConfig(
    num_cars=1,
    num_exits=1,
    num_start_positions=3,
    length_range=(40.0, 50.0),
    width=10.0,
    fog_probability=0.0,
    max_steps=110,
    seed=0,
)
schedule = TrainConfig(
    total_episodes=200,
    episodes_per_iter=10,
    epochs_per_iter=15,
    learning_rate=1e-3,
)


def log(m):
    print(
        f"iter {m['iteration']:2d}  return {m['mean_return']:8.2f}  "
        f"success {m['flat_success']:.2f}  kl {m['approx_kl']:.4f}"
    )


params, metrics = train(schedule, env, seed=0, mode="baseline", log_fn=log)

per_seed, mean = evaluate(params, env, condition="sunny", n_episodes=50)
rows = [(f"demo [seed {s}]", "Sunny", m) for s, m in zip((0, 1, 2), per_seed)]
rows.append(("demo [mean of 3]", "Sunny", mean))
print()
print(report_table(rows))
