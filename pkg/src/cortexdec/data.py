"""Dataset containers, the 13-class vocabulary and the synthetic corpus.

Two binary formats, both little-endian and written atomically:

* "CDT1" epoched datasets: header (magic, version u16, n_trials u32,
  n_channels u16, n_samples u32, sample_rate f64), channel-name block
  (u16 length + UTF-8 per channel), label block (u8 per trial), subject
  block (u16 per trial), then the float32 payload, trial-major row-major.
* "CDR1" continuous recordings: same layout with the trial blocks replaced
  by an events block (count u32, then onset u32 + label u8 + subject u16
  per event) and a channels x samples payload.

The synthetic generator stands in for the unavailable 16-subject corpus:
1/f-shaped background noise colored by a fixed per-subject channel-mixing
matrix, plus class-specific amplitude-modulated oscillatory bursts
(frequency 4 + 3c Hz on a per-class channel subset; the silence class adds
nothing).
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError
from .signal import DEFAULT_CLASS_NAMES, Event, RawRecording, TrialSet

CLASS_NAMES = DEFAULT_CLASS_NAMES
SILENCE_CLASS = 12

DATASET_MAGIC = b"CDT1"
RECORDING_MAGIC = b"CDR1"
_VERSION = 1

# fraction of identity perturbed away by each subject's mixing matrix
_MIX_STRENGTH = 0.5


def _check_names(names) -> tuple[str, ...]:
    names = tuple(names)
    for n in names:
        if len(n.encode("utf-8")) > 0xFFFF:
            raise ConfigError(f"channel name too long: {n[:20]}...")
    return names


def _read_exact(f, n: int, what: str, path) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise DataFormatError(f"{path}: truncated {what}: expected {n} bytes, got {len(chunk)}")
    return chunk


def write_dataset(trials: TrialSet, path) -> None:
    """Persist a TrialSet as CDT1 (float32 payload, atomic write)."""
    path = os.fspath(path)
    n_trials, n_channels, n_samples = trials.data.shape
    if n_trials and trials.subject_ids.max() > 0xFFFF:
        raise ConfigError("subject ids above 65535 do not fit the container")
    names = _check_names(trials.channel_names)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<HIHId", _VERSION, n_trials, n_channels, n_samples,
                            float(trials.sample_rate_hz)))
        for name in names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(trials.labels.astype("<u1").tobytes())
        f.write(trials.subject_ids.astype("<u2").tobytes())
        f.write(np.ascontiguousarray(trials.data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_dataset(path) -> TrialSet:
    """Read a CDT1 file; errors name the malformed block."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        version, n_trials, n_channels, n_samples, rate = struct.unpack(
            "<HIHId", _read_exact(f, 20, "header", path))
        if version != _VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        names = []
        for _ in range(n_channels):
            (ln,) = struct.unpack("<H", _read_exact(f, 2, "channel-name length", path))
            names.append(_read_exact(f, ln, "channel name", path).decode("utf-8"))
        labels = np.frombuffer(_read_exact(f, n_trials, "label block", path), dtype="<u1")
        if n_trials and labels.max() >= 13:
            raise DataFormatError(f"{path}: label {labels.max()} outside [0, 13)")
        subjects = np.frombuffer(_read_exact(f, 2 * n_trials, "subject block", path), dtype="<u2")
        expected = n_trials * n_channels * n_samples * 4
        payload = f.read()
        if len(payload) != expected:
            raise DataFormatError(
                f"{path}: truncated payload: expected {expected} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_trials, n_channels, n_samples)
    return TrialSet(data=data.copy(), labels=labels.astype(np.int64),
                    subject_ids=subjects.astype(np.int64), channel_names=tuple(names),
                    sample_rate_hz=rate)


def write_recording(recording: RawRecording, path) -> None:
    """Persist a RawRecording as CDR1 (float32 payload, atomic write)."""
    path = os.fspath(path)
    n_channels, n_samples = recording.data.shape
    names = _check_names(recording.channel_names)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(RECORDING_MAGIC)
        f.write(struct.pack("<HHId", _VERSION, n_channels, n_samples,
                            float(recording.sample_rate_hz)))
        for name in names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(struct.pack("<I", len(recording.events)))
        for ev in recording.events:
            f.write(struct.pack("<IBH", ev.onset_sample, ev.label_id, ev.subject_id))
        f.write(np.ascontiguousarray(recording.data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_recording(path) -> RawRecording:
    path = os.fspath(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RECORDING_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {RECORDING_MAGIC!r}")
        version, n_channels, n_samples, rate = struct.unpack(
            "<HHId", _read_exact(f, 16, "header", path))
        if version != _VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        names = []
        for _ in range(n_channels):
            (ln,) = struct.unpack("<H", _read_exact(f, 2, "channel-name length", path))
            names.append(_read_exact(f, ln, "channel name", path).decode("utf-8"))
        (n_events,) = struct.unpack("<I", _read_exact(f, 4, "event count", path))
        events = []
        for _ in range(n_events):
            onset, label, subject = struct.unpack("<IBH", _read_exact(f, 7, "event", path))
            events.append(Event(onset, label, subject))
        expected = n_channels * n_samples * 4
        payload = f.read()
        if len(payload) != expected:
            raise DataFormatError(
                f"{path}: truncated payload: expected {expected} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_channels, n_samples).astype(np.float64)
    return RawRecording(data=data, sample_rate_hz=rate, channel_names=tuple(names),
                        events=tuple(events))


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int
    trials_per_class_per_subject: int
    n_channels: int = 10
    n_samples: int = 1500
    sample_rate: float = 1000.0
    noise_exponent: float = 1.0
    signature_snr: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.trials_per_class_per_subject < 1:
            raise ConfigError("subject and trial counts must be >= 1")
        if self.n_channels < 1 or self.n_samples < 1:
            raise ConfigError("n_channels and n_samples must be >= 1")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be > 0, got {self.sample_rate}")
        if self.signature_snr < 0:
            raise ConfigError(f"signature_snr must be >= 0, got {self.signature_snr}")


def signature_frequency(label: int) -> float:
    """Burst frequency of a word class: 4 + 3c Hz (silence has none)."""
    return 4.0 + 3.0 * label


def signature_channels(config: SynthConfig) -> list[np.ndarray]:
    """Per-class channel subsets, fixed across subjects for a given seed."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xC1A55)))
    width = min(3, config.n_channels)
    return [rng.choice(config.n_channels, size=width, replace=False)
            for _ in range(SILENCE_CLASS)]


def subject_mixing(config: SynthConfig, subject: int) -> np.ndarray:
    """Fixed channel-mixing matrix of one subject: identity plus a seeded perturbation."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x51B, subject)))
    n = config.n_channels
    return np.eye(n) + _MIX_STRENGTH * rng.normal(size=(n, n)) / np.sqrt(n)


def _pink_noise(rng: np.random.Generator, n_channels: int, n_samples: int,
                exponent: float) -> np.ndarray:
    """Gaussian noise with power spectrum ~ 1/f^exponent, unit RMS per channel."""
    freqs = np.fft.rfftfreq(n_samples)
    shaping = np.zeros_like(freqs)
    shaping[1:] = freqs[1:] ** (-exponent / 2.0)
    spectrum = (rng.normal(size=(n_channels, freqs.size))
                + 1j * rng.normal(size=(n_channels, freqs.size))) * shaping
    x = np.fft.irfft(spectrum, n=n_samples, axis=1)
    rms = x.std(axis=1, keepdims=True)
    rms[rms == 0] = 1.0
    return x / rms


def _burst(rng: np.random.Generator, n_samples: int, sample_rate: float,
           freq_hz: float) -> np.ndarray:
    """Amplitude-modulated oscillation: Hann envelope over a random window."""
    width = max(8, int(round(n_samples * rng.uniform(0.4, 0.7))))
    width = min(width, n_samples)
    start = rng.integers(0, n_samples - width + 1)
    t = np.arange(n_samples) / sample_rate
    envelope = np.zeros(n_samples)
    envelope[start:start + width] = np.hanning(width)
    phase = rng.uniform(0, 2 * np.pi)
    return envelope * np.sin(2 * np.pi * freq_hz * t + phase)


def synth_generate(config: SynthConfig) -> TrialSet:
    """Deterministic synthetic corpus; balanced classes for every subject."""
    n_classes = len(CLASS_NAMES)
    per_class = signature_channels(config)
    n_trials = config.n_subjects * n_classes * config.trials_per_class_per_subject
    data = np.empty((n_trials, config.n_channels, config.n_samples), dtype=np.float64)
    labels = np.empty(n_trials, dtype=np.int64)
    subjects = np.empty(n_trials, dtype=np.int64)

    i = 0
    for subject in range(config.n_subjects):
        mixing = subject_mixing(config, subject)
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x7121A15, subject)))
        for label in range(n_classes):
            for _ in range(config.trials_per_class_per_subject):
                trial = mixing @ _pink_noise(rng, config.n_channels, config.n_samples,
                                             config.noise_exponent)
                if label != SILENCE_CLASS and config.signature_snr > 0:
                    wave = _burst(rng, config.n_samples, config.sample_rate,
                                  signature_frequency(label))
                    trial[per_class[label]] += config.signature_snr * wave
                data[i] = trial
                labels[i] = label
                subjects[i] = subject
                i += 1
    names = tuple(f"CH{c:02d}" for c in range(config.n_channels))
    return TrialSet(data=data.astype(np.float32), labels=labels, subject_ids=subjects,
                    channel_names=names, sample_rate_hz=config.sample_rate)


def shuffle_labels(trials: TrialSet, seed: int) -> TrialSet:
    """Uniformly permute labels; data untouched, class histogram preserved."""
    if trials.n_trials == 0:
        raise ConfigError("cannot shuffle labels of an empty TrialSet")
    perm = np.random.default_rng(seed).permutation(trials.n_trials)
    return TrialSet(data=trials.data, labels=trials.labels[perm].copy(),
                    subject_ids=trials.subject_ids, channel_names=trials.channel_names,
                    sample_rate_hz=trials.sample_rate_hz, class_names=trials.class_names)


# ---------------------------------------------------------------------------
# corpus bookkeeping


def payload_sha256(path) -> str:
    """SHA-256 of the float32 payload block of a CDT1 file."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        _, n_trials, n_channels, n_samples, _ = struct.unpack(
            "<HIHId", _read_exact(f, 20, "header", path))
        for _ in range(n_channels):
            (ln,) = struct.unpack("<H", _read_exact(f, 2, "channel-name length", path))
            _read_exact(f, ln, "channel name", path)
        _read_exact(f, 3 * n_trials, "label and subject blocks", path)
        digest = hashlib.sha256()
        expected = n_trials * n_channels * n_samples * 4
        remaining = expected
        while remaining:
            chunk = f.read(min(1 << 20, remaining))
            if not chunk:
                raise DataFormatError(
                    f"{path}: truncated payload: expected {expected} bytes, "
                    f"got {expected - remaining}")
            digest.update(chunk)
            remaining -= len(chunk)
    return digest.hexdigest()


def manifest_line(path) -> str:
    """``path,n_trials,n_subjects,payload_sha256`` for the corpus manifest."""
    trials = read_dataset(path)
    n_subjects = int(np.unique(trials.subject_ids).size)
    return f"{os.fspath(path)},{trials.n_trials},{n_subjects},{payload_sha256(path)}"


def append_manifest(manifest_path, dataset_path) -> str:
    line = manifest_line(dataset_path)
    with open(manifest_path, "a", encoding="utf-8") as f:
        f.write(line + "\n")
    return line
