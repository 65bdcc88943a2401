"""
Training the lip-sync expert
============================

The expert embeds 5-frame windows of lip features and of audio features and
scores a pair by the cosine of the two embeddings. After a few seconds of
training on aligned vs shifted pairs it tells synchronised audio apart from
audio that is 8 frames off, and its offset-distance curve points at the
true shift.
"""
from pathlib import Path

import numpy as np

from avdub.corpus import build_language_pair, generate_corpus
from avdub.metrics import best_offset, lse_from_curve, offset_curve
from avdub.plots import plot_offset_curve
from avdub.sync_expert import aligned_tracks, init_sync_expert, separation, train_sync_expert

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

pair = build_language_pair(40, 0)
corpus = generate_corpus(pair, n_train=500, n_test=50)

# %% before and after training
held_out = aligned_tracks(corpus.test, pair)
print("untrained P(aligned), P(offset 8): %.3f, %.3f" % separation(init_sync_expert(0), held_out))
expert = train_sync_expert(corpus.train, pair, steps=1500, seed=0)
print("trained   P(aligned), P(offset 8): %.3f, %.3f" % separation(expert, held_out))

# %% recover an injected offset
track = held_out[0]
shift = 7
lip, audio = track.lip[shift:], track.audio[:len(track.lip) - shift]
curve = offset_curve(expert, lip, audio)
lse_d, lse_c = lse_from_curve(curve)
print(f"injected shift {shift}, recovered {best_offset(curve)}; LSE-D {lse_d:.3f}, LSE-C {lse_c:.3f}")
plot_offset_curve(curve, out / "02_offset_curve.svg", title=f"audio delayed by {shift} frames")
print("wrote", out / "02_offset_curve.svg", "| min at", int(np.argmin(curve)) - 15)
