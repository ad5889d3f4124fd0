import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cortexdec.data import (
    CLASS_NAMES,
    SILENCE_CLASS,
    SynthConfig,
    append_manifest,
    manifest_line,
    payload_sha256,
    read_dataset,
    read_recording,
    shuffle_labels,
    signature_channels,
    signature_frequency,
    subject_mixing,
    synth_generate,
    write_dataset,
    write_recording,
)
from cortexdec.errors import ConfigError, DataFormatError
from cortexdec.signal import Event, RawRecording, TrialSet

from conftest import make_trialset


def test_vocabulary_shape():
    assert len(CLASS_NAMES) == 13
    assert len(set(CLASS_NAMES)) == 13
    assert CLASS_NAMES[SILENCE_CLASS] == "silence"
    assert CLASS_NAMES[2] == "hello"


# ---------------------------------------------------------------------------
# CDT1 container


def test_roundtrip_bit_exact(tmp_path, trialset):
    path = tmp_path / "set.cdt"
    write_dataset(trialset, path)
    back = read_dataset(path)
    assert back.data.tobytes() == trialset.data.astype("<f4").tobytes()
    np.testing.assert_array_equal(back.labels, trialset.labels)
    np.testing.assert_array_equal(back.subject_ids, trialset.subject_ids)
    assert back.channel_names == trialset.channel_names
    assert back.sample_rate_hz == trialset.sample_rate_hz
    assert back.class_names == CLASS_NAMES


def test_roundtrip_non_ascii_channel_names(tmp_path):
    ts = make_trialset(n_trials=3, n_channels=2)
    ts = TrialSet(data=ts.data, labels=ts.labels, subject_ids=ts.subject_ids,
                  channel_names=("Fpé", "θ-mid"), sample_rate_hz=500.0)
    path = tmp_path / "set.cdt"
    write_dataset(ts, path)
    assert read_dataset(path).channel_names == ("Fpé", "θ-mid")


@settings(deadline=None, max_examples=10)
@given(st.integers(0, 2**16), st.integers(1, 9), st.integers(1, 5), st.integers(1, 17))
def test_roundtrip_random_shapes(tmp_path_factory, seed, n_trials, n_channels, n_samples):
    ts = make_trialset(n_trials=n_trials, n_channels=n_channels, n_samples=n_samples, seed=seed)
    path = tmp_path_factory.mktemp("cdt") / "x.cdt"
    write_dataset(ts, path)
    back = read_dataset(path)
    assert back.data.tobytes() == ts.data.astype("<f4").tobytes()
    assert back.data.shape == ts.data.shape


def test_empty_file_bad_magic(tmp_path):
    path = tmp_path / "empty.cdt"
    path.write_bytes(b"")
    with pytest.raises(DataFormatError, match="bad magic"):
        read_dataset(path)


def test_truncated_payload_reports_counts(tmp_path, trialset):
    path = tmp_path / "set.cdt"
    write_dataset(trialset, path)
    blob = path.read_bytes()
    n_ch, n_s = trialset.data.shape[1], trialset.data.shape[2]
    path.write_bytes(blob[:-n_ch * n_s * 4])  # drop exactly one trial
    expected = trialset.n_trials * n_ch * n_s * 4
    with pytest.raises(DataFormatError, match=f"expected {expected} bytes, got {expected - n_ch * n_s * 4}"):
        read_dataset(path)


def test_label_out_of_range_rejected(tmp_path, trialset):
    path = tmp_path / "set.cdt"
    write_dataset(trialset, path)
    blob = bytearray(path.read_bytes())
    name_block = sum(2 + len(n.encode()) for n in trialset.channel_names)
    label_offset = 4 + 20 + name_block
    blob[label_offset] = 14
    path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError, match="label"):
        read_dataset(path)


def test_atomic_write_leaves_no_temp(tmp_path, trialset):
    path = tmp_path / "set.cdt"
    write_dataset(trialset, path)
    assert list(tmp_path.iterdir()) == [path]


# ---------------------------------------------------------------------------
# CDR1 container


def test_recording_roundtrip(tmp_path, rng):
    rec = RawRecording(
        data=rng.normal(size=(3, 500)).astype(np.float32).astype(np.float64),
        sample_rate_hz=250.0,
        channel_names=("A", "B", "C"),
        events=(Event(10, 0, 1), Event(200, 12, 3)),
    )
    path = tmp_path / "rec.cdr"
    write_recording(rec, path)
    back = read_recording(path)
    assert back.data.tobytes() == rec.data.tobytes()
    assert back.events == rec.events
    assert back.channel_names == rec.channel_names
    assert back.sample_rate_hz == rec.sample_rate_hz


def test_recording_magic_mismatch(tmp_path, trialset):
    path = tmp_path / "set.cdt"
    write_dataset(trialset, path)
    with pytest.raises(DataFormatError, match="bad magic"):
        read_recording(path)


# ---------------------------------------------------------------------------
# synthetic generator


def small_cfg(**kw):
    base = dict(n_subjects=3, trials_per_class_per_subject=1, n_channels=6,
                n_samples=128, sample_rate=250.0, signature_snr=4.0, seed=5)
    base.update(kw)
    return SynthConfig(**base)


def test_synth_deterministic():
    a = synth_generate(small_cfg())
    b = synth_generate(small_cfg())
    assert a.data.tobytes() == b.data.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synth_counts_and_balance():
    cfg = small_cfg(n_subjects=4, trials_per_class_per_subject=3)
    trials = synth_generate(cfg)
    assert trials.n_trials == 4 * 13 * 3
    hist = np.bincount(trials.labels, minlength=13)
    assert (hist == 12).all()
    for s in range(4):
        sub_hist = np.bincount(trials.labels[trials.subject_ids == s], minlength=13)
        assert (sub_hist == 3).all()


def test_mixing_matrices_pairwise_distinct():
    cfg = small_cfg(n_subjects=6)
    mats = [subject_mixing(cfg, s) for s in range(6)]
    for i in range(6):
        for j in range(i + 1, 6):
            assert np.linalg.norm(mats[i] - mats[j]) > 0


def test_signature_channel_sets_fixed_per_seed():
    cfg = small_cfg()
    a = signature_channels(cfg)
    b = signature_channels(cfg)
    assert len(a) == 12
    for ca, cb in zip(a, b):
        np.testing.assert_array_equal(ca, cb)


def band_power(trials_data, channels, low, high, fs):
    """Mean periodogram power over a band and channel subset (oracle)."""
    seg = trials_data[:, channels, :]
    spectrum = np.abs(np.fft.rfft(seg, axis=-1)) ** 2
    freqs = np.fft.rfftfreq(seg.shape[-1], d=1.0 / fs)
    mask = (freqs >= low) & (freqs <= high)
    return spectrum[..., mask].mean()


def test_class0_band_power_exceeds_silence():
    cfg = small_cfg(n_subjects=4, trials_per_class_per_subject=4, signature_snr=5.0)
    trials = synth_generate(cfg)
    chans = signature_channels(cfg)[0]
    f0 = signature_frequency(0)
    assert f0 == 4.0
    class0 = trials.data[trials.labels == 0]
    silence = trials.data[trials.labels == SILENCE_CLASS]
    p0 = band_power(class0, chans, 3.0, 5.0, cfg.sample_rate)
    psil = band_power(silence, chans, 3.0, 5.0, cfg.sample_rate)
    assert p0 > psil


def test_snr_zero_adds_no_signature():
    cfg0 = small_cfg(signature_snr=0.0)
    trials = synth_generate(cfg0)
    chans = signature_channels(cfg0)[5]
    f5 = signature_frequency(5)
    lo, hi = f5 - 1, f5 + 1
    p5 = band_power(trials.data[trials.labels == 5], chans, lo, hi, cfg0.sample_rate)
    psil = band_power(trials.data[trials.labels == SILENCE_CLASS], chans, lo, hi, cfg0.sample_rate)
    assert p5 == pytest.approx(psil, rel=0.5)  # statistically indistinguishable


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(n_subjects=0)
    with pytest.raises(ConfigError):
        small_cfg(signature_snr=-1.0)


def test_snr_monotonically_improves_decodability():
    """Cross-validated accuracy is non-strictly increasing over SNR levels."""
    from cortexdec.model import EncoderConfig
    from cortexdec.training import TrainConfig, cross_validate

    accuracies = []
    for snr in (0.0, 4.0, 12.0):
        cfg = SynthConfig(n_subjects=5, trials_per_class_per_subject=2, n_channels=6,
                          n_samples=128, sample_rate=250.0, signature_snr=snr, seed=31)
        trials = synth_generate(cfg)
        model_cfg = EncoderConfig(input_channels=6, input_samples=128, feature_channels=16)
        train_cfg = TrainConfig(batch_size=32, max_epochs=60, validate_every=10,
                                patience=3, seed=2, lr=3e-4)
        result = cross_validate(trials, model_cfg, train_cfg, k=5, grouping="trial")
        accuracies.append(result.pooled.accuracy)
    assert accuracies[0] <= accuracies[1] <= accuracies[2], accuracies


# ---------------------------------------------------------------------------
# label shuffling


def test_shuffle_preserves_histogram(trialset):
    out = shuffle_labels(trialset, seed=3)
    np.testing.assert_array_equal(np.bincount(out.labels, minlength=13),
                                  np.bincount(trialset.labels, minlength=13))
    assert out.data is trialset.data  # data untouched


def test_shuffle_deterministic(trialset):
    a = shuffle_labels(trialset, seed=3)
    b = shuffle_labels(trialset, seed=3)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = shuffle_labels(trialset, seed=4)
    assert not np.array_equal(a.labels, c.labels)


def test_shuffle_empty_rejected():
    empty = TrialSet(data=np.zeros((0, 2, 4), dtype=np.float32), labels=np.zeros(0, int),
                     subject_ids=np.zeros(0, int), channel_names=("A", "B"),
                     sample_rate_hz=100.0)
    with pytest.raises(ConfigError):
        shuffle_labels(empty, seed=0)


# ---------------------------------------------------------------------------
# manifest


def test_payload_sha_matches_hashlib(tmp_path, trialset):
    path = tmp_path / "set.cdt"
    write_dataset(trialset, path)
    payload = trialset.data.astype("<f4").tobytes()
    assert payload_sha256(path) == hashlib.sha256(payload).hexdigest()


def test_manifest_line_fields(tmp_path, trialset):
    path = tmp_path / "set.cdt"
    write_dataset(trialset, path)
    line = manifest_line(path)
    p, n_trials, n_subjects, digest = line.split(",")
    assert p == str(path)
    assert int(n_trials) == trialset.n_trials
    assert int(n_subjects) == 2
    assert len(digest) == 64


def test_append_manifest(tmp_path, trialset):
    data_path = tmp_path / "set.cdt"
    manifest = tmp_path / "manifest.txt"
    write_dataset(trialset, data_path)
    append_manifest(manifest, data_path)
    append_manifest(manifest, data_path)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0] == lines[1] == manifest_line(data_path)
