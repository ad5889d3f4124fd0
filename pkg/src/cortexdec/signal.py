"""EEG preprocessing: band-pass design, zero-phase filtering, epoching.

The band-pass is designed from the analog Butterworth prototype (poles on
the unit circle in the left half plane), warped through the lowpass-to-
bandpass transform with frequency pre-warping, discretized by the bilinear
transform, and realized as cascaded second-order sections for numerical
stability at the extreme low edge. All signal math runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.signal import sosfilt

from .errors import ConfigError, DataFormatError, DimensionError

# Broca/Wernicke-area channels, in canonical listing order.
SPEECH_CHANNELS = ("AF3", "F3", "F5", "FC3", "FC5", "T7", "C5", "TP7", "CP5", "P5")

# 12 spoken words plus the silent phase, indices 0..12.
DEFAULT_CLASS_NAMES = (
    "ambulance", "clock", "hello", "help me", "light", "pain", "stop",
    "thank you", "toilet", "tv", "water", "yes", "silence",
)


class Event(NamedTuple):
    onset_sample: int
    label_id: int
    subject_id: int


@dataclass
class RawRecording:
    """Continuous multi-channel signal (microvolts) plus event markers."""

    data: np.ndarray                # (channels, samples) float64
    sample_rate_hz: float
    channel_names: tuple[str, ...]
    events: tuple[Event, ...]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DimensionError(f"recording data must be (channels, samples), got {self.data.shape}")
        self.channel_names = tuple(self.channel_names)
        if len(self.channel_names) != self.data.shape[0]:
            raise ConfigError(
                f"{len(self.channel_names)} channel names for {self.data.shape[0]} data channels")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise ConfigError("channel names must be unique")
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        self.events = tuple(Event(*e) for e in self.events)
        n = self.data.shape[1]
        for i, ev in enumerate(self.events):
            if not 0 <= ev.onset_sample < n:
                raise ConfigError(f"event {i} onset {ev.onset_sample} outside recording of {n} samples")
            if not 0 <= ev.label_id < len(DEFAULT_CLASS_NAMES):
                raise ConfigError(f"event {i} label {ev.label_id} outside [0, 13)")
            if ev.subject_id < 0:
                raise ConfigError(f"event {i} has negative subject id {ev.subject_id}")


@dataclass
class TrialSet:
    """Epoched trials (trials x channels x samples) with labels and subjects."""

    data: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    channel_names: tuple[str, ...]
    sample_rate_hz: float
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        self.channel_names = tuple(self.channel_names)
        self.class_names = tuple(self.class_names)
        if self.data.ndim != 3:
            raise DimensionError(f"trial data must be (trials, channels, samples), got {self.data.shape}")
        n = self.data.shape[0]
        if self.labels.shape != (n,) or self.subject_ids.shape != (n,):
            raise DimensionError(
                f"labels {self.labels.shape} and subject_ids {self.subject_ids.shape} must both be ({n},)")
        if len(self.class_names) != 13:
            raise ConfigError(f"class_names must have exactly 13 entries, got {len(self.class_names)}")
        if len(self.channel_names) != self.data.shape[1]:
            raise ConfigError(
                f"{len(self.channel_names)} channel names for {self.data.shape[1]} data channels")
        if n and (self.labels.min() < 0 or self.labels.max() >= 13):
            raise ConfigError("labels must lie in [0, 13)")

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections [b0 b1 b2 1 a1 a2], applied first row first.

    Sections are ordered by increasing pole magnitude (most damped first);
    ``overall_gain`` is applied once per pass.
    """

    sections: np.ndarray
    overall_gain: float

    def __post_init__(self):
        object.__setattr__(self, "sections", np.asarray(self.sections, dtype=np.float64).reshape(-1, 6))

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    def pole_magnitudes(self) -> np.ndarray:
        mags = []
        for _, _, _, _, a1, a2 in self.sections:
            mags.extend(abs(r) for r in np.roots([1.0, a1, a2]))
        return np.array(mags)

    def is_stable(self) -> bool:
        return bool((self.pole_magnitudes() < 1.0).all())


def design_butterworth_bandpass(order: int, low_hz: float, high_hz: float,
                                sample_rate_hz: float) -> BiquadCascade:
    """Design a digital Butterworth band-pass as a cascade of biquads.

    Band edges are the half-power (-3.01 dB) points. Raises ConfigError
    naming the offending parameter for invalid edges or order.
    """
    if order < 1:
        raise ConfigError(f"order must be >= 1, got order={order}")
    if sample_rate_hz <= 0:
        raise ConfigError(f"sample_rate_hz must be > 0, got sample_rate_hz={sample_rate_hz}")
    if low_hz <= 0:
        raise ConfigError(f"low_hz must be > 0, got low_hz={low_hz}")
    if low_hz >= high_hz:
        raise ConfigError(f"low_hz must be < high_hz, got low_hz={low_hz}, high_hz={high_hz}")
    nyq = sample_rate_hz / 2.0
    if high_hz >= nyq:
        raise ConfigError(f"high_hz must be < Nyquist ({nyq} Hz), got high_hz={high_hz}")

    # Analog lowpass prototype: order poles on the unit circle, left half plane.
    m = np.arange(-order + 1, order, 2)
    p_proto = -np.exp(1j * np.pi * m / (2 * order))

    # Pre-warped edges (rad/s) so the bilinear transform lands them exactly.
    fs2 = 2.0 * sample_rate_hz
    w_low = fs2 * np.tan(np.pi * low_hz / sample_rate_hz)
    w_high = fs2 * np.tan(np.pi * high_hz / sample_rate_hz)
    bw = w_high - w_low
    w0 = np.sqrt(w_low * w_high)

    # Lowpass-to-bandpass: each prototype pole splits in two; order zeros at s=0.
    p_lp = p_proto * (bw / 2.0)
    disc = np.sqrt(p_lp * p_lp - w0 * w0)
    p_bp = np.concatenate([p_lp + disc, p_lp - disc])
    k_bp = bw ** order

    # Bilinear transform z = (2fs + s) / (2fs - s); s-zeros at 0 map to z=+1
    # and the order-sized pole excess contributes zeros at z=-1.
    p_z = (fs2 + p_bp) / (fs2 - p_bp)
    k_z = k_bp * float(np.real(np.prod(fs2 - np.zeros(order)) / np.prod(fs2 - p_bp)))

    sections = _pair_bandpass_sections(p_z)
    cascade = BiquadCascade(sections=sections, overall_gain=k_z)
    if not cascade.is_stable():
        raise ConfigError(
            f"designed cascade is unstable (pole magnitude {cascade.pole_magnitudes().max():.6f}); "
            f"band {low_hz}-{high_hz} Hz at {sample_rate_hz} Hz is numerically degenerate")
    return cascade


def _pair_bandpass_sections(poles: np.ndarray) -> np.ndarray:
    """Group 2N band-pass poles into N biquads, numerators all (z^2 - 1).

    Complex poles pair with their conjugates; real poles (wide bands split
    the odd prototype pole on the real axis) pair with each other.
    """
    tol = 1e-9 * max(1.0, float(np.abs(poles).max()))
    complex_reps = [p for p in poles if p.imag > tol]
    reals = sorted(float(p.real) for p in poles if abs(p.imag) <= tol)
    if 2 * len(complex_reps) + len(reals) != len(poles) or len(reals) % 2:
        raise AssertionError("band-pass pole set is not conjugate-closed")

    rows: list[tuple[float, tuple[float, float]]] = []
    for p in complex_reps:
        rows.append((abs(p), (-2.0 * p.real, float(abs(p)) ** 2)))
    for r1, r2 in zip(reals[0::2], reals[1::2]):
        rows.append((max(abs(r1), abs(r2)), (-(r1 + r2), r1 * r2)))
    rows.sort(key=lambda item: item[0])
    return np.array([[1.0, 0.0, -1.0, 1.0, a1, a2] for _, (a1, a2) in rows])


def frequency_response(cascade: BiquadCascade, freq_hz: float, sample_rate_hz: float) -> complex:
    """Exact transfer-function value at z = exp(i 2 pi f / fs)."""
    nyq = sample_rate_hz / 2.0
    if not 0 <= freq_hz <= nyq:
        raise ConfigError(f"freq_hz must lie in [0, {nyq}], got {freq_hz}")
    zi = np.exp(-2j * np.pi * freq_hz / sample_rate_hz)  # z^-1
    h = complex(cascade.overall_gain)
    for b0, b1, b2, _, a1, a2 in cascade.sections:
        h *= (b0 + b1 * zi + b2 * zi * zi) / (1.0 + a1 * zi + a2 * zi * zi)
    return h


def _pad_length(cascade: BiquadCascade) -> int:
    # 3x the cascade state length (two delays per section).
    return 3 * (cascade.n_sections * 2)


def _run_cascade(cascade: BiquadCascade, x: np.ndarray) -> np.ndarray:
    return sosfilt(cascade.sections, cascade.overall_gain * x)


def apply_zero_phase(cascade: BiquadCascade, signal: np.ndarray) -> np.ndarray:
    """Forward-backward filtering: zero phase, |H|^2 magnitude response.

    Edges are odd-reflected by 3x the cascade state length, then cropped,
    so output length equals input length.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"apply_zero_phase expects a 1-D signal, got shape {x.shape}")
    pad = _pad_length(cascade)
    if x.size <= pad:
        raise ConfigError(
            f"signal of {x.size} samples is too short for edge padding; need more than {pad}")
    head = 2.0 * x[0] - x[pad:0:-1]
    tail = 2.0 * x[-1] - x[-2:-pad - 2:-1]
    ext = np.concatenate([head, x, tail])
    y = _run_cascade(cascade, ext)
    y = _run_cascade(cascade, y[::-1])[::-1]
    return y[pad:pad + x.size]


def apply_single_pass(cascade: BiquadCascade, signal: np.ndarray) -> np.ndarray:
    """Causal one-directional application (no padding, zero initial state)."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"apply_single_pass expects a 1-D signal, got shape {x.shape}")
    return _run_cascade(cascade, x)


def segment_trials(recording: RawRecording, trial_seconds: float,
                   baseline_seconds: float) -> TrialSet:
    """Cut one fixed-length trial per event and baseline-correct per channel.

    The trial starts at the event onset; the correction subtracts the mean
    of the window immediately preceding the onset.
    """
    if trial_seconds <= 0:
        raise ConfigError(f"trial_seconds must be > 0, got {trial_seconds}")
    if baseline_seconds < 0:
        raise ConfigError(f"baseline_seconds must be >= 0, got {baseline_seconds}")
    fs = recording.sample_rate_hz
    n_trial = int(round(trial_seconds * fs))
    n_base = int(round(baseline_seconds * fs))
    total = recording.data.shape[1]

    bad = [i for i, ev in enumerate(recording.events)
           if ev.onset_sample - n_base < 0 or ev.onset_sample + n_trial > total]
    if bad:
        raise ConfigError(
            f"events {bad} too close to the recording edge for a {n_trial}-sample trial "
            f"with a {n_base}-sample baseline")

    n_ch = recording.data.shape[0]
    trials = np.empty((len(recording.events), n_ch, n_trial), dtype=np.float64)
    labels = np.empty(len(recording.events), dtype=np.int64)
    subjects = np.empty(len(recording.events), dtype=np.int64)
    for i, ev in enumerate(recording.events):
        seg = recording.data[:, ev.onset_sample:ev.onset_sample + n_trial]
        if n_base:
            base = recording.data[:, ev.onset_sample - n_base:ev.onset_sample].mean(axis=1)
            seg = seg - base[:, None]
        trials[i] = seg
        labels[i] = ev.label_id
        subjects[i] = ev.subject_id
    return TrialSet(
        data=trials, labels=labels, subject_ids=subjects,
        channel_names=recording.channel_names, sample_rate_hz=fs)


def select_channels(trials: TrialSet, names: Sequence[str]) -> TrialSet:
    """Reduce and reorder the channel dimension to match ``names``."""
    index = {name: i for i, name in enumerate(trials.channel_names)}
    missing = [n for n in names if n not in index]
    if missing:
        raise ConfigError(f"unknown channel name(s): {', '.join(missing)}")
    picks = [index[n] for n in names]
    return TrialSet(
        data=trials.data[:, picks, :].copy(),
        labels=trials.labels.copy(),
        subject_ids=trials.subject_ids.copy(),
        channel_names=tuple(names),
        sample_rate_hz=trials.sample_rate_hz,
        class_names=trials.class_names)


@dataclass(frozen=True)
class PreprocessConfig:
    filter_order: int = 5
    low_hz: float = 0.5
    high_hz: float = 120.0
    trial_seconds: float = 1.5
    baseline_seconds: float = 0.5
    channels: tuple[str, ...] = SPEECH_CHANNELS
    zero_phase: bool = True  # single-pass (causal) mode when False


_CONFIG_PARSERS = {
    "filter_order": int,
    "low_hz": float,
    "high_hz": float,
    "trial_seconds": float,
    "baseline_seconds": float,
    "channels": lambda v: tuple(s.strip() for s in v.split(",") if s.strip()),
}


def parse_preprocess_config(text: str) -> PreprocessConfig:
    """Parse ``key = value`` lines; blank lines and '#' comments allowed."""
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            overrides[key] = _CONFIG_PARSERS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return PreprocessConfig(**overrides)


def preprocess(recording: RawRecording, config: PreprocessConfig) -> TrialSet:
    """Band-pass (per channel, on the continuous data), segment, select.

    Deterministic for identical inputs and config.
    """
    cascade = design_butterworth_bandpass(
        config.filter_order, config.low_hz, config.high_hz, recording.sample_rate_hz)
    apply = apply_zero_phase if config.zero_phase else apply_single_pass
    filtered = np.stack([apply(cascade, ch) for ch in recording.data])
    clean = RawRecording(
        data=filtered, sample_rate_hz=recording.sample_rate_hz,
        channel_names=recording.channel_names, events=recording.events)
    trials = segment_trials(clean, config.trial_seconds, config.baseline_seconds)
    if config.channels is not None:
        trials = select_channels(trials, config.channels)
    return trials
