"""Train a 2-DOF policy with the default settings and race it against PID.

64x64 grid, 1000 updates of 16-step windows; about 15 minutes on one core.
The second half compares both controllers on three unseen targets in BaseNR
and in the buoyant BuoyNR flow the policy never saw.

    python3 demos/train_and_compare.py
"""

import warnings

import numpy as np

from fluidctl import baselines as B
from fluidctl import environment as env
from fluidctl import evaluation as ev
from fluidctl import policy as pol
from fluidctl import training as T

warnings.simplefilter("ignore", RuntimeWarning)

tc = T.TrainConfig.defaults("BaseNR", env_overrides={"resolution": 64})


def show(row):
    if row["iteration"] % 100 == 0:
        print(f"update {row['iteration']:4d}  loss {row['loss']:9.3f}")


res = T.train_diffphys(tc, progress=show)
print(f"best checkpoint from update {res.best_iteration}")

rng = np.random.default_rng(7)
sched = env.ObjectiveSchedule.sequence([env.sample_objective(rng, 2)[0] for _ in range(3)], 100.0)
reports = []
for env_id in ("BaseNR", "BuoyNR"):
    cfg = env.make_environment(env_id, {"resolution": 64})
    for ctrl in (pol.PolicyController(res.params, "Diff"), B.make_baseline("pid", cfg)):
        _, rep = ev.run_test(ctrl, cfg, sched, test=env_id)
        reports.append(rep)
print(ev.compare(reports).to_text(), end="")
