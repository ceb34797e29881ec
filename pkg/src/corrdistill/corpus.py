"""Seeded harmonic-plus-noise "utterances" so the pipeline runs without data."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .augment import DEFAULT_SAMPLE_RATE, AudioBuffer, read_wav

# rough vowel formants (F1, F2, F3) in Hz
_VOWELS = np.array(
    [
        [730, 1090, 2440],
        [270, 2290, 3010],
        [530, 1840, 2480],
        [570, 840, 2410],
        [300, 870, 2240],
        [660, 1720, 2410],
        [490, 1350, 1690],
    ],
    dtype=np.float64,
)


def synth_utterance(seed, duration_s: float = 1.0, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> AudioBuffer:
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate_hz))
    sr = sample_rate_hz
    out = np.zeros(n)
    speaker_f0 = rng.uniform(90.0, 230.0)
    n_syll = int(rng.integers(3, 7))
    bounds = np.sort(rng.uniform(0.05, 0.95, size=2 * n_syll)) * n
    for k in range(n_syll):
        start, stop = int(bounds[2 * k]), int(bounds[2 * k + 1])
        if stop - start < sr // 50:
            continue
        m = stop - start
        t = np.arange(m) / sr
        envelope = np.sin(np.pi * np.arange(m) / m) ** 2
        if rng.random() < 0.2:
            # unvoiced, fricative-like burst
            burst = rng.standard_normal(m)
            spec = np.fft.rfft(burst)
            f = np.fft.rfftfreq(m, 1.0 / sr)
            spec *= np.exp(-0.5 * ((f - rng.uniform(3000, 6000)) / 1200.0) ** 2)
            seg = np.fft.irfft(spec, n=m)
            seg *= 0.3 / (np.std(seg) + 1e-12)
        else:
            f0 = speaker_f0 * (1.0 + rng.uniform(-0.15, 0.15) + rng.uniform(-0.1, 0.1) * t / max(t[-1], 1e-9))
            formants = _VOWELS[rng.integers(len(_VOWELS))] * rng.uniform(0.9, 1.1)
            phase = 2 * np.pi * np.cumsum(f0) / sr
            seg = np.zeros(m)
            for h in range(1, int(4000 // speaker_f0) + 1):
                fh = h * np.mean(f0)
                gain = sum(np.exp(-0.5 * ((fh - fm) / (60.0 + 0.08 * fm)) ** 2) for fm in formants)
                seg += (gain + 0.02) / h**0.5 * np.sin(h * phase)
        out[start:stop] += envelope * seg
    out += 1e-3 * rng.standard_normal(n)
    peak = np.max(np.abs(out))
    return AudioBuffer(out * rng.uniform(0.3, 0.7) / peak, sr)


def synthetic_corpus(
    n: int, seed: int = 0, duration_s: float = 1.0, sample_rate_hz: int = DEFAULT_SAMPLE_RATE
) -> list[AudioBuffer]:
    seeds = np.random.SeedSequence([seed, 0x5EED]).spawn(n)
    return [synth_utterance(s, duration_s, sample_rate_hz) for s in seeds]


def load_wav_corpus(directory, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> list[AudioBuffer]:
    paths = sorted(Path(directory).glob("*.wav"))
    if not paths:
        raise FileNotFoundError(f"no .wav files in {directory}")
    return [read_wav(p, sample_rate_hz) for p in paths]
