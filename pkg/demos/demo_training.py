"""A short training run on a synthetic search problem.

Three synthetic images, two tasks, scripted expert scanpaths. Runs a reduced
number of iterations (enough to watch every loss term fall) and plots the
training log. The acceptance suite runs the same setup to full memorization.
"""

import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)),
                                os.pardir, "tests"))
from synth import TOY_TASKS, toy_object_table, toy_pyramids, toy_trials

from fovsearch import env, irl
from fovsearch import model as mdl

OUT = os.path.dirname(os.path.abspath(__file__))

model_cfg = mdl.ModelConfig(ffm_channels=8, head_hidden=32, term_hidden=16,
                            tasks=TOY_TASKS, n_object_classes=80)
train_cfg = irl.TrainConfig(lr=3e-3, batch_size=24, iterations=30, seed=7,
                            value_mode="expert", term_weight=0.25, omega=0.1)

trainer = irl.Trainer(model_cfg, train_cfg, env.InMemoryPyramids(toy_pyramids()),
                      objects=toy_object_table(), seed_params=train_cfg.seed)
trainer.add_trials(toy_trials())
print(f"buffer holds {len(trainer.buffer)} expert transitions")
print(f"model has {mdl.n_parameters(trainer.params):,} parameters")

for i in range(train_cfg.iterations):
    row = trainer.train_step(i)
    if (i + 1) % 5 == 0:
        print(f"step {row['step']:>3}  L_irl={row['L_irl']:.4f}  "
              f"L_det={row['L_det']:.4f}  L_term={row['L_term']:.4f}  "
              f"alpha={row['alpha']:.3f}  sigma={row['sigma']:.4f}")

fig, axes = plt.subplots(1, 3, figsize=(14, 3.5))
steps = [r["step"] for r in trainer.log_rows]
for ax, key in zip(axes, ("L_irl", "L_det", "L_term")):
    ax.plot(steps, [r[key] for r in trainer.log_rows])
    ax.set_title(key)
    ax.set_xlabel("step")
fig.tight_layout()
fig.savefig(os.path.join(OUT, "training_losses.png"), dpi=110)
print("loss curves written to", os.path.join(OUT, "training_losses.png"))
print("the learnable retina parameters moved with the gradients:",
      f"alpha {trainer.log_rows[0]['alpha']:.4f} -> {trainer.log_rows[-1]['alpha']:.4f},",
      f"sigma {trainer.log_rows[0]['sigma']:.4f} -> {trainer.log_rows[-1]['sigma']:.4f}")
