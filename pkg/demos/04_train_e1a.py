"""
Training the actor-critic scheduler
===================================

Sixteen simulated highways run side by side.  In each epoch every worker
schedules 20 arrivals with the current policy, then the shared actor and
critic are updated.  The reward sits near -9 for the first hundred or so
epochs while the policy is still close to uniform, then climbs as the agent
learns to pick free TBs.  The default 400 epochs take a few minutes on one
core; pass a smaller number as the first argument for a quick look.
"""
import sys

import numpy as np

from docasched import get_preset
from docasched.rl import evaluate_policy, train
from docasched.presets import with_train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 400
preset = with_train(get_preset("E1-A"), epochs=epochs, seed=0)


def show(row):
    if row["epoch"] % 25 == 0:
        print(f"epoch {row['epoch']:4d}  mean reward {row['mean_reward']:6.2f}  "
              f"(workers {row['min_reward']:6.2f} .. {row['max_reward']:6.2f})", flush=True)


result = train(preset.scenario, preset.train, progress=show)

# Greedy evaluation: the most probable TB is chosen every time.
ev = evaluate_policy(result.actor, preset.scenario, 1000, np.random.default_rng(1))
print(f"\ngreedy mean PRR after {epochs} epochs: {ev.stats.mean:.3f}")
print("reward windows without any transmission:", result.empty_windows)
