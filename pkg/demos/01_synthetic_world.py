"""
A synthetic language pair
=========================

Two toy languages share one set of lip shapes: unit ``u`` in the source and
its translation ``perm[u]`` in the target look the same on the lips but sound
different. This script builds the pair, draws one sample, and renders both
the lip track and the audio features so the two can be compared by eye.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from avdub.corpus import build_language_pair, generate_sample, render_lip_track
from avdub.vocoder import extract_audio_features, synthesize_waveform

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

pair = build_language_pair(vocab_size=40, seed=0)
print("translation of units 0..9:", pair.perm[:10])
print("duration scale of units 0..9:", np.round(pair.duration_scale[:10], 2))

# %% one parallel sample
sample = generate_sample(pair, seed=3, length_range=(12, 12))
print("source units   ", sample.source.units, "durations", sample.source.durations)
print("target units   ", sample.target.units, "durations", sample.target.durations)
for name, p in zip(("short", "neutral", "long"), sample.paraphrases):
    print(f"{name:8s} paraphrase: {len(p)} units")

# %% what the video and the audio look like
lip = render_lip_track(sample.source, pair, seed=sample.sample_seed).frames
wav = synthesize_waveform(sample.source, pair)
feats = extract_audio_features(wav, pair).frames
print(f"{len(lip)} video frames, {len(wav.samples)} audio samples, {len(feats)} feature frames")

fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
axes[0].imshow(lip.T, aspect="auto", origin="lower")
axes[0].set_ylabel("lip feature")
axes[1].imshow(feats.T, aspect="auto", origin="lower")
axes[1].set_ylabel("audio band")
axes[1].set_xlabel("frame (40 ms)")
fig.tight_layout()
fig.savefig(out / "01_source_tracks.png", dpi=100)
print("wrote", out / "01_source_tracks.png")
