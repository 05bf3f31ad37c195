"""
Overfitting two utterances
==========================

Desk-scale model, two utterances, watch the reconstruction and pitch
losses fall. ``python demos/02_tiny_overfit.py 2000`` reproduces the
acceptance run; the default is shorter.
"""

import sys

import numpy as np

from hiervst.experiments import moving_average, tiny_overfit

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200

res = tiny_overfit(steps=steps)

ms = moving_average(res.stft)
mp = moving_average(res.pitch)
for k in np.linspace(0, len(ms) - 1, 6).astype(int):
    print(f"step {k + 10:5d}  stft {ms[k]:.3f}  pitch {mp[k]:.3f}")

print(f"L_STFT drop {res.stft_drop:.0%}, L_pitch drop {res.pitch_drop:.0%}")
