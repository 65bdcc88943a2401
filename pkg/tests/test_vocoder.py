import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avdub.corpus import SRC, TGT, UnitSequence, build_language_pair
from avdub.nn_core import ParameterSet, finite_difference_check, value_and_grad
from avdub.vocoder import (SAMPLES_PER_FRAME, Waveform, dump_features, extract_audio_features,
                           hard_expand, load_features, read_wav, soft_expand, soft_expand_weights,
                           synthesize_waveform, unit_feature_table, write_wav)


def one_hot_pair(band: int):
    pair = build_language_pair(40, 0)
    pair.acoustic_src = pair.acoustic_src.copy()
    pair.acoustic_src[0] = np.eye(16)[band]
    return pair


def test_waveform_length_and_amplitude(pair):
    seq = UnitSequence(SRC, np.array([1, 5, 9]), np.array([2, 3, 1]))
    wav = synthesize_waveform(seq, pair)
    assert len(wav.samples) == 6 * SAMPLES_PER_FRAME
    assert np.max(np.abs(wav.samples)) <= 0.3 + 1e-12


def test_unknown_unit_is_rejected(pair):
    with pytest.raises(ValueError, match="unknown unit"):
        synthesize_waveform(UnitSequence(SRC, np.array([40]), np.array([1])), pair)


@pytest.mark.parametrize("band", [0, 7, 15])
def test_one_hot_unit_concentrates_energy(band):
    pair = one_hot_pair(band)
    wav = synthesize_waveform(UnitSequence(SRC, np.array([0]), np.array([4])), pair)
    spectrum = np.abs(np.fft.rfft(wav.samples)) ** 2
    freqs = np.fft.rfftfreq(len(wav.samples), 1 / 16000)
    # energy near each band center, 75 Hz either side
    per_band = np.array([spectrum[np.abs(freqs - f) < 75].sum() for f in pair.band_freqs])
    assert per_band[band] / per_band.sum() >= 0.9


def test_silence_gives_zero_features(pair):
    feats = extract_audio_features(Waveform(np.zeros(3 * SAMPLES_PER_FRAME)), pair).frames
    assert feats.shape == (3, 16) and np.all(feats == 0)


def test_round_trip_identifiability(pair):
    # interior frames of a 4-frame unit match log(1 + beta * A[u]) in shape
    worst = 1.0
    for lang in (SRC, TGT):
        table = pair.acoustics(lang)
        for u in range(pair.vocab_size):
            wav = synthesize_waveform(UnitSequence(lang, np.array([u]), np.array([4])), pair)
            feats = extract_audio_features(wav, pair).frames[1:3]
            assert np.all(feats.argmax(axis=1) == table[u].argmax())
            best = 0.0
            for beta in np.geomspace(0.1, 100, 200):
                ref = np.log1p(beta * table[u])
                cos = feats @ ref / (np.linalg.norm(feats, axis=1) * np.linalg.norm(ref))
                best = max(best, cos.min())
            worst = min(worst, best)
    assert worst > 0.99


def test_feature_track_length(pair):
    seq = UnitSequence(TGT, np.array([3, 4]), np.array([3, 2]))
    assert len(extract_audio_features(synthesize_waveform(seq, pair), pair)) == 5


def test_unit_feature_table_shape(pair):
    assert unit_feature_table(pair, TGT).shape == (40, 16)


def test_soft_expand_single_unit():
    emb = np.arange(16.0)[None, :]
    out = soft_expand(emb, np.array([np.log(3.0)]), 7)
    np.testing.assert_allclose(out, np.repeat(emb, 7, axis=0), rtol=0, atol=1e-12)


def test_soft_expand_centers():
    # centers are cumsum(d) - d/2: [2,4] -> [1, 4]
    ld = torch.log(torch.tensor([2.0, 4.0]))
    d = torch.exp(ld)
    centers = torch.cumsum(d, 0) - d / 2
    assert centers.tolist() == pytest.approx([1.0, 4.0], abs=1e-12)
    w = soft_expand_weights(ld, 6)
    # frame midpoints 0.5 .. 5.5: first frame leans on unit 0, last on unit 1
    assert w[0, 0] > 0.9 and w[-1, 1] > 0.9
    # equal weights exactly halfway between the centers, at 2.5 (frame 2)
    assert w[2].tolist() == pytest.approx([0.5, 0.5], abs=1e-12)


def test_soft_weights_rows_sum_to_one():
    w = soft_expand_weights(np.log([1.5, 2.0, 0.7, 4.0]), 12, sigma=0.8)
    np.testing.assert_allclose(w.sum(dim=1).numpy(), 1.0, rtol=0, atol=1e-12)


def test_soft_expand_rejects_bad_input():
    with pytest.raises(ValueError):
        soft_expand(np.ones((2, 16)), np.array([0.0, np.nan]), 4)


def test_soft_expand_approaches_hard_expand():
    table = np.random.default_rng(0).normal(size=(2, 16))
    soft = soft_expand(table, np.log([3.0, 3.0]), 6, sigma=0.05)
    hard = hard_expand([0, 1], [3, 3], table)
    interior = [0, 1, 4, 5]
    np.testing.assert_allclose(soft[interior], hard[interior], atol=1e-3)


def test_soft_expand_gradient_matches_fd():
    rng = np.random.default_rng(1)
    table = torch.as_tensor(rng.normal(size=(4, 16)))
    probe = torch.as_tensor(rng.normal(size=(10, 16)))
    params = ParameterSet({"log_d": np.log([2.0, 3.0, 1.5, 2.5])})
    fn = lambda p: (soft_expand(table, p["log_d"], 10) * probe).sum()  # noqa: E731
    assert finite_difference_check(lambda p: value_and_grad(fn, p), params) < 1e-4


def test_wav_round_trip(pair, tmp_path):
    wav = synthesize_waveform(UnitSequence(SRC, np.array([2, 3]), np.array([2, 2])), pair)
    write_wav(tmp_path / "a.wav", wav)
    back = read_wav(tmp_path / "a.wav")
    assert back.rate == 16000 and len(back.samples) == len(wav.samples)
    assert np.max(np.abs(back.samples - wav.samples)) < 1 / 32767


def test_feature_dump_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(7, 16))
    dump_features(tmp_path / "f.bin", x)
    assert np.array_equal(load_features(tmp_path / "f.bin"), x)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1.0, 1.5), min_size=1, max_size=6), st.integers(1, 40),
       st.floats(0.3, 3.0))
def test_soft_weights_are_a_distribution(log_d, T, sigma):
    w = soft_expand_weights(np.array(log_d), T, sigma).numpy()
    assert w.shape == (T, len(log_d))
    assert np.all(w >= 0) and np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
