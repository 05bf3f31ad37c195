"""
Zero-shot and one-shot conversion on the toy corpus
===================================================

Four training speakers, a fifth held out. Training takes hours on a
CPU; the run directory is resumable, so interrupting is fine.

    python demos/03_zero_shot.py runs/zeroshot
"""

import logging
import sys

from hiervst.experiments import ZeroShotSetup, one_shot_comparison, summarize, train_zero_shot, zero_shot_trials

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

run_dir = sys.argv[1] if len(sys.argv) > 1 else "runs/zeroshot"
setup = ZeroShotSetup()
trainer = train_zero_shot(setup, run_dir)
print("trained steps:", trainer.step)

# held-out speaker -> training speaker: is the output closer to the target style?
zs = summarize(zero_shot_trials(trainer, setup))
print("zero-shot: target beats source on %.0f%% of %d trials" % (100 * zs["win_rate"], zs["n"]))
print("  mean style-cosine to target %.3f, to source %.3f" % (zs["mean_cos_target"], zs["mean_cos_source"]))

# adapt to one held-out utterance and convert towards it
zero, one = one_shot_comparison(trainer, setup)
print("one-shot: mean style-cosine to target %.4f -> %.4f"
      % (summarize(zero)["mean_cos_target"], summarize(one)["mean_cos_target"]))
