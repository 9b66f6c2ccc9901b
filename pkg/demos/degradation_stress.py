"""
When text-only training goes too far
====================================

Raise the text fine-tuning learning rate twentyfold and the LM drifts away
from the acoustic embeddings: ASR dev loss first falls, then climbs back up
while the text loss keeps improving. The monitor keeps the best step, so the
returned adapters come from before the damage.

Writes stress_curve.png next to this script. About three minutes on one core.
"""
import argparse
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from textonly_adapt.experiment import build_source_model, desk_benchmark, desk_config, stress_run

ap = argparse.ArgumentParser()
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--factor", type=float, default=20.0)
ap.add_argument("--epochs", type=int, default=20)
ap.add_argument("--quick", action="store_true")
args = ap.parse_args()

torch.set_num_threads(1)
logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = desk_config(args.seed)
sizes = None
if args.quick:
    sizes = {"general_text": 200, "source_train": 60, "target_text": 100, "source_test": 20, "target_test": 20}
    cfg = desk_config(args.seed, foundation_epochs=2, phase_a_min_epochs=1, phase_a_max_epochs=1,
                      phase_b_epochs=1, eval_interval=5)
    args.epochs = 2
bench = desk_benchmark(args.seed, sizes)
src = build_source_model(bench, cfg)

arm, rep = stress_run(src, bench, cfg, factor=args.factor, text_epochs=args.epochs)
print(f"\nlr x{args.factor:g}: best step {rep['best_step']} after "
      f"{100 * rep['text_fraction_at_best']:.0f}% of the text, degraded={rep['degraded']}, "
      f"slope after best {rep['slope_after_best']:.2e}")
print(arm.report.to_table())

curve = arm.curve
steps = curve.column("step")
fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
ax1.plot(steps, curve.column("asr_dev_loss"), label="ASR dev loss")
ax1.plot(steps, curve.column("lm_train_loss"), label="LM train loss")
ax2.plot(steps, curve.column("token_acc"), color="C2")
for ax in (ax1, ax2):
    ax.axvline(curve.best.step, color="k", ls=":", lw=1)
    ax.set_xlabel("step")
ax1.legend()
ax2.set_ylabel("token accuracy")
fig.tight_layout()
out = Path(__file__).with_name("stress_curve.png")
fig.savefig(out, dpi=120)
print("wrote", out)
