"""
Metrics by hand
===============

Small, checkable numbers for each metric: the log-spectral distance between
a signal and its half-amplitude copy, unit BLEU for a short hypothesis, and
LSE-D / LSE-C from an offset-distance curve.
"""
import math

import numpy as np

from avdub.metrics import log_spectral_distance, lse_from_curve, unit_bleu

x = np.random.default_rng(0).normal(size=16000)
print(f"LSD(x, x/2) = {log_spectral_distance(x, 0.5 * x):.4f} dB  (20 log10 2 = {20 * math.log10(2):.4f})")

print("BLEU, identical:", unit_bleu([4, 5, 6, 7, 8], [[4, 5, 6, 7, 8]]))
print("BLEU, half-length prefix: %.4f (brevity penalty e^-1 = %.4f)"
      % (unit_bleu([1, 2, 3, 4], [list(range(1, 9))]), math.exp(-1)))

offsets = np.arange(-15, 16)
curve = 1.0 + 0.02 * (offsets - 3) ** 2
d, c = lse_from_curve(curve)
print(f"toy curve: LSE-D {d:.3f} at offset {offsets[np.argmin(curve)]}, LSE-C {c:.3f}")
