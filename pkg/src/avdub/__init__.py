"""Synthetic audio-visual speech-to-speech dubbing with a lip-sync-aware duration predictor.

Modules: ``nn_core`` (parameters, optimizer, checkpoints), ``corpus`` (synthetic
language pair and samples), ``vocoder`` (units to audio and features),
``sync_expert``, ``duration``, ``translator``, ``metrics``, ``experiments`` and
``cli``.
"""
__version__ = "0.1.0"
