"""Spectrogram frontend, augmentation filters and vowel-ratio statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .corpus import AudioClip, Sample
from .errors import ConfigError, DataError, NormalizationError, ShapeError

logger = logging.getLogger(__name__)

WINDOW_S = 0.02
HOP_S = 0.01
LOWPASS_TAPS = 101
SNR_LEVELS_DB = (20.0, 10.0, 3.0)


@dataclass(frozen=True)
class Spectrogram:
    """Magnitude STFT laid out as ``values[bin, frame]``.

    ``bin_hz`` is the bin spacing, ``frame_s`` the hop between frame
    starts and ``window_s`` the analysis window length.
    """

    values: np.ndarray
    bin_hz: float
    frame_s: float
    window_s: float
    normalized: bool = False

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.bin_hz

    def frame_starts(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.frame_s


def frame_count(n_samples: int, win: int, hop: int) -> int:
    return (n_samples - win) // hop + 1


def stft_magnitude(clip: AudioClip, window_s: float = WINDOW_S, hop_s: float = HOP_S) -> Spectrogram:
    """Hamming-windowed STFT magnitude with FFT size equal to the window.

    Uses the unnormalized forward DFT ``X[k] = sum_n w[n] x[n] e^{-2 pi i k n / N}``,
    so per frame ``|X0|^2 + 2 sum_{0<k<N/2} |Xk|^2 + |X_{N/2}|^2 = N * sum (w x)^2``
    for even N. The trailing partial frame is dropped.
    """
    sr = clip.sample_rate
    win = int(round(window_s * sr))
    hop = int(round(hop_s * sr))
    if win < 2 or hop < 1:
        raise ConfigError(f"window {win} / hop {hop} samples too small")
    x = clip.samples
    if x.size < win:
        raise ShapeError(f"clip of {x.size} samples shorter than one {win}-sample window")
    n_frames = frame_count(x.size, win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(win)[None, :]
    mag = np.abs(np.fft.rfft(frames, n=win, axis=1)).T
    return Spectrogram(mag, sr / win, hop / sr, win / sr, False)


def zscore(spec: Spectrogram) -> Spectrogram:
    """Standardize over all cells jointly."""
    v = spec.values
    sd = v.std()
    if v.size < 2 or not sd > 0:
        raise NormalizationError("spectrogram has zero variance")
    return replace(spec, values=(v - v.mean()) / sd, normalized=True)


def design_lowpass(cutoff_hz: float, sample_rate: int, n_taps: int = LOWPASS_TAPS) -> np.ndarray:
    """Hamming-windowed sinc taps with unit DC gain."""
    if not 0 < cutoff_hz < sample_rate / 2:
        raise ConfigError(f"cutoff {cutoff_hz} Hz outside (0, {sample_rate / 2})")
    if n_taps % 2 == 0:
        raise ConfigError("n_taps must be odd for a center-aligned linear-phase filter")
    fc = cutoff_hz / sample_rate
    n = np.arange(n_taps) - (n_taps - 1) / 2
    h = 2 * fc * np.sinc(2 * fc * n) * np.hamming(n_taps)
    return h / h.sum()


def lowpass(clip: AudioClip, cutoff_hz: float = 3000.0, n_taps: int = LOWPASS_TAPS) -> AudioClip:
    h = design_lowpass(cutoff_hz, clip.sample_rate, n_taps)
    y = np.convolve(clip.samples, h, mode="full")
    d = (n_taps - 1) // 2
    y = y[d : d + len(clip)]
    return AudioClip(np.clip(y, -1.0, 1.0), clip.sample_rate)


def fit_noise(noise: AudioClip, n: int) -> np.ndarray:
    """Crop or loop noise to ``n`` samples."""
    reps = -(-n // len(noise))
    return np.tile(noise.samples, reps)[:n]


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def scaled_noise(clip: AudioClip, noise: AudioClip, snr_db: float) -> np.ndarray:
    """Noise scaled so that signal power over scaled-noise power equals ``snr_db``."""
    if clip.sample_rate != noise.sample_rate:
        raise ConfigError(f"sample rates differ: {clip.sample_rate} vs {noise.sample_rate}")
    nz = fit_noise(noise, len(clip))
    p_noise = power(nz)
    if p_noise <= 0:
        raise ConfigError("noise is silent")
    p_sig = power(clip.samples)
    if p_sig <= 0:
        raise ConfigError("signal is silent; SNR undefined")
    scale = np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return scale * nz


def mix_at_snr(clip: AudioClip, noise: AudioClip, snr_db: float) -> AudioClip:
    mixed = clip.samples + scaled_noise(clip, noise, snr_db)
    return AudioClip(np.clip(mixed, -1.0, 1.0), clip.sample_rate)


def measured_snr_db(signal: np.ndarray, noise_component: np.ndarray) -> float:
    return 10.0 * np.log10(power(signal) / power(noise_component))


# ---------------------------------------------------------------------------
# vowel ratios and bootstrap


@dataclass(frozen=True)
class RatioStats:
    amplitude_ratio: np.ndarray
    duration_ratio: np.ndarray
    stress: tuple
    skipped: int
    group_means: dict
    group_sds: dict

    def group(self, stress: str, which: str = "amplitude") -> np.ndarray:
        values = self.amplitude_ratio if which == "amplitude" else self.duration_ratio
        mask = np.array([s == stress for s in self.stress], dtype=bool)
        return values[mask]


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if x.size else 0.0


def vowel_ratio_stats(samples: Sequence[Sample]) -> RatioStats:
    """Initial-vowel share of RMS amplitude and duration, ``a / (a + b)``."""
    amp, dur, stress = [], [], []
    skipped = 0
    for s in samples:
        v1, v2 = s.alignment.initial_final_vowels()
        a1, a2 = rms(s.clip.segment(v1.start, v1.end)), rms(s.clip.segment(v2.start, v2.end))
        d1, d2 = v1.end - v1.start, v2.end - v2.start
        if a1 + a2 <= 0 or d1 + d2 <= 0:
            skipped += 1
            continue
        amp.append(a1 / (a1 + a2))
        dur.append(d1 / (d1 + d2))
        stress.append(s.alignment.stress)
    if skipped:
        logger.warning("skipped %d samples with silent or empty vowels", skipped)
    amp, dur = np.array(amp), np.array(dur)
    means, sds = {}, {}
    for cls in sorted(set(stress)):
        m = np.array([x == cls for x in stress])
        means[cls] = {"amplitude": float(amp[m].mean()), "duration": float(dur[m].mean())}
        sds[cls] = {"amplitude": float(amp[m].std(ddof=1)) if m.sum() > 1 else 0.0,
                    "duration": float(dur[m].std(ddof=1)) if m.sum() > 1 else 0.0}
    return RatioStats(amp, dur, tuple(stress), skipped, means, sds)


@dataclass(frozen=True)
class BootstrapCI:
    mean_diff: float
    ci_low: float
    ci_high: float
    replicates: int
    confidence: float

    def contains(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high


def bootstrap_mean_diff(group_a, group_b, replicates: int = 1000, confidence: float = 0.95,
                        seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap interval for ``mean(a) - mean(b)``.

    Each group is resampled with replacement independently.
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("bootstrap needs two non-empty groups")
    if replicates < 100:
        raise ConfigError(f"replicates must be >= 100, got {replicates}")
    if not 0 < confidence < 1:
        raise ConfigError(f"confidence must be in (0, 1), got {confidence}")
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, a.size, size=(replicates, a.size))
    ib = rng.integers(0, b.size, size=(replicates, b.size))
    diffs = a[ia].mean(axis=1) - b[ib].mean(axis=1)
    tail = 100 * (1 - confidence) / 2
    lo, hi = np.percentile(diffs, [tail, 100 - tail])
    return BootstrapCI(float(a.mean() - b.mean()), float(lo), float(hi), replicates, confidence)
