"""Waveform distortions, log-mel features and WAV I/O.

Additive distortions mix a seeded synthetic noise at a target SNR; the
non-additive ones are synthetic-RIR reverberation, WSOLA pitch shifting and a
second-order notch. Everything is deterministic given its seed.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.fft import next_fast_len

from .exceptions import ContractError, DegenerateInputError

ADDITIVE_KINDS = ("gaussian", "white", "pink", "babble")
NON_ADDITIVE_KINDS = ("reverb", "pitch_shift", "band_reject")
SNR_RANGE_DB = (10.0, 20.0)
CLEAN_SNR_DB = 20.0

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_N_MELS = 40
DEFAULT_FRAME_MS = 25.0
DEFAULT_HOP_MS = 10.0
LOG_FLOOR = 1e-10


@dataclass
class AudioBuffer:
    """Mono waveform. Samples are float64; amplitude is not range-checked."""

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size < 1:
            raise ContractError(f"audio must be a non-empty 1-d array, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise ContractError("audio contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise ContractError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.samples = x
        self.sample_rate_hz = int(self.sample_rate_hz)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def with_samples(self, samples: np.ndarray) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate_hz)


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    snr_db: float | None = None
    rt60_s: float | None = None
    semitones: float | None = None
    center_hz: float | None = None
    q: float | None = None

    def __post_init__(self):
        if self.kind in ADDITIVE_KINDS:
            if self.snr_db is None or not SNR_RANGE_DB[0] <= self.snr_db < SNR_RANGE_DB[1]:
                raise ContractError(
                    f"additive distortion {self.kind!r} needs snr_db in [10, 20), got {self.snr_db}"
                )
        elif self.kind in NON_ADDITIVE_KINDS:
            if self.snr_db is not None:
                raise ContractError(f"non-additive distortion {self.kind!r} takes no snr_db")
            required = {"reverb": ("rt60_s",), "pitch_shift": ("semitones",), "band_reject": ("center_hz", "q")}
            for name in required[self.kind]:
                if getattr(self, name) is None:
                    raise ContractError(f"{self.kind} distortion needs {name}")
        else:
            raise ContractError(f"unknown distortion kind {self.kind!r}")

    @property
    def additive(self) -> bool:
        return self.kind in ADDITIVE_KINDS

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class DistortionPlan:
    specs: tuple[DistortionSpec, ...] = field(default_factory=tuple)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))

    @property
    def effective_snr_db(self) -> float:
        """SNR of the (worst) additive spec; clean-equivalent 20 dB when there is none."""
        snrs = [s.snr_db for s in self.specs if s.additive]
        if not snrs:
            return CLEAN_SNR_DB
        return float(min(max(min(snrs), SNR_RANGE_DB[0]), SNR_RANGE_DB[1]))

    def to_dict(self) -> dict:
        return {
            "specs": [s.to_dict() for s in self.specs],
            "effective_snr_db": self.effective_snr_db,
            "seed": self.seed,
        }


# ---------------------------------------------------------------- SNR


def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x))


def measure_snr(signal: AudioBuffer, noise: AudioBuffer) -> float:
    """10 log10(P_signal / P_noise) with P the mean squared amplitude."""
    if len(signal) != len(noise) or signal.sample_rate_hz != noise.sample_rate_hz:
        raise ContractError("signal and noise must share length and sample rate")
    p_noise = _power(noise.samples)
    if p_noise <= 0.0:
        raise DegenerateInputError("noise has zero power")
    return 10.0 * np.log10(_power(signal.samples) / p_noise)


def scale_noise_to_snr(
    signal: AudioBuffer, noise: AudioBuffer, target_snr_db: float, rng: np.random.Generator | None = None
) -> AudioBuffer:
    """Crop ``noise`` to the signal length (random offset) and scale it to the target SNR."""
    if noise.sample_rate_hz != signal.sample_rate_hz:
        raise ContractError("signal and noise sample rates differ")
    n = len(signal)
    if len(noise) < n:
        raise ContractError(f"noise ({len(noise)} samples) shorter than signal ({n})")
    extra = len(noise) - n
    offset = 0 if extra == 0 or rng is None else int(rng.integers(0, extra + 1))
    segment = noise.samples[offset : offset + n]
    p_signal, p_noise = _power(signal.samples), _power(segment)
    if p_signal <= 0.0:
        raise DegenerateInputError("signal has zero power")
    if p_noise <= 0.0:
        raise DegenerateInputError("noise has zero power")
    alpha = np.sqrt(p_signal / (p_noise * 10.0 ** (target_snr_db / 10.0)))
    return signal.with_samples(alpha * segment)


def mix_at_snr(
    signal: AudioBuffer,
    noise: AudioBuffer,
    target_snr_db: float,
    rng: np.random.Generator | None = None,
    clip: bool = True,
) -> AudioBuffer:
    scaled = scale_noise_to_snr(signal, noise, target_snr_db, rng)
    out = signal.samples + scaled.samples
    return signal.with_samples(np.clip(out, -1.0, 1.0) if clip else out)


# ---------------------------------------------------------------- noise synthesis


def _unit_rms(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x))


def synth_noise(kind: str, length: int, seed, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> AudioBuffer:
    """Seeded unit-RMS noise: ``gaussian``, ``white`` (uniform), ``pink`` or ``babble``."""
    if int(length) < 1:
        raise ContractError(f"noise length must be >= 1, got {length}")
    length = int(length)
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        x = rng.standard_normal(length)
    elif kind == "white":
        x = rng.uniform(-1.0, 1.0, length)
    elif kind == "pink":
        n = next_fast_len(length, real=True)
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.arange(spectrum.size, dtype=np.float64)
        freqs[0] = 1.0
        x = np.fft.irfft(spectrum / np.sqrt(freqs), n=n)[:length]
    elif kind == "babble":
        x = _babble(rng, length, sample_rate_hz)
    else:
        raise ContractError(f"unknown noise kind {kind!r}")
    if length == 1 or not np.any(x):
        x = np.ones(length)
    return AudioBuffer(_unit_rms(x), sample_rate_hz)


def _babble(rng: np.random.Generator, length: int, sr: int, n_streams: int = 6) -> np.ndarray:
    """Sum of amplitude-modulated, band-limited noise streams."""
    n = next_fast_len(length, real=True)  # prime lengths make the FFT crawl
    t = np.arange(length) / sr
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    center = rng.uniform(300.0, min(3000.0, 0.4 * sr), size=(n_streams, 1))
    width = rng.uniform(0.3, 0.6, size=(n_streams, 1)) * center
    band = np.exp(-0.5 * ((freqs - center) / (width / 2.0)) ** 4)
    streams = np.fft.irfft(np.fft.rfft(rng.standard_normal((n_streams, n)), axis=1) * band, n=n, axis=1)
    streams = streams[:, :length]
    rate = rng.uniform(3.0, 7.0, size=(n_streams, 1))  # syllable-like modulation
    phase = rng.uniform(0, 2 * np.pi, size=(n_streams, 1))
    envelope = 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + phase))
    streams /= streams.std(axis=1, keepdims=True) + 1e-12
    return (envelope * streams).sum(axis=0)


# ---------------------------------------------------------------- non-additive distortions


def synthetic_rir(rt60_s: float, seed, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Exponentially decaying noise tail (-60 dB at rt60) after a unit direct path."""
    n = max(int(round(rt60_s * sample_rate_hz)), 1)
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate_hz
    rir = rng.standard_normal(n) * np.exp(-np.log(1000.0) * t / rt60_s)
    rir[0] = 1.0
    return rir / np.sqrt(np.sum(rir * rir))


def apply_reverb(signal: AudioBuffer, rt60_s: float, seed=0) -> AudioBuffer:
    if rt60_s < 0:
        raise ContractError(f"rt60 must be >= 0, got {rt60_s}")
    if rt60_s == 0:
        return signal.with_samples(signal.samples.copy())
    rir = synthetic_rir(rt60_s, seed, signal.sample_rate_hz)
    wet = sps.fftconvolve(signal.samples, rir)[: len(signal)]
    return signal.with_samples(wet)


def pitch_shift(signal: AudioBuffer, semitones: float) -> AudioBuffer:
    """Shift pitch by resampling, then restore the duration with WSOLA."""
    if abs(semitones) > 12:
        raise ContractError(f"pitch shift limited to +/-12 semitones, got {semitones}")
    if semitones == 0:
        return signal.with_samples(signal.samples.copy())
    ratio = 2.0 ** (semitones / 12.0)
    x = signal.samples
    n = x.size
    positions = np.arange(0.0, n - 1 + 1e-9, ratio)
    resampled = np.interp(positions, np.arange(n), x)
    stretched = wsola_stretch(resampled, n)
    return signal.with_samples(stretched)


def wsola_stretch(x: np.ndarray, out_len: int, frame: int = 512, tolerance: int = 128) -> np.ndarray:
    """Waveform-similarity overlap-add time stretch of ``x`` to ``out_len`` samples."""
    if x.size < 2:
        return np.full(out_len, x[0] if x.size else 0.0)
    hop_out = frame // 2
    hop_in = hop_out * (x.size / out_len)
    window = sps.get_window("hann", frame)  # periodic: sums to 1 at 50% overlap
    padded = np.concatenate([np.zeros(tolerance), x, np.zeros(frame + 2 * tolerance + hop_out)])
    n_frames = out_len // hop_out + 1
    out = np.zeros(n_frames * hop_out + frame)
    norm = np.zeros_like(out)
    prev = tolerance
    for k in range(n_frames):
        nominal = tolerance + int(round(k * hop_in))
        if k == 0:
            pos = nominal
        else:
            natural = padded[prev + hop_out : prev + hop_out + frame]
            lo = max(nominal - tolerance, 0)
            hi = min(nominal + tolerance, padded.size - frame)
            region = padded[lo : hi + frame]
            scores = np.correlate(region, natural, mode="valid")
            pos = lo + int(np.argmax(scores)) if np.any(scores) else nominal
        out[k * hop_out : k * hop_out + frame] += padded[pos : pos + frame] * window
        norm[k * hop_out : k * hop_out + frame] += window
        prev = pos
    out = np.where(norm > 1e-3, out / np.maximum(norm, 1e-3), out)
    return out[:out_len]


def band_reject(signal: AudioBuffer, center_hz: float, q: float) -> AudioBuffer:
    nyquist = signal.sample_rate_hz / 2.0
    if not 0.0 < center_hz < nyquist:
        raise ContractError(f"notch centre must lie in (0, {nyquist}) Hz, got {center_hz}")
    if q <= 0:
        raise ContractError(f"notch q must be positive, got {q}")
    b, a = sps.iirnotch(center_hz, q, fs=signal.sample_rate_hz)
    return signal.with_samples(sps.lfilter(b, a, signal.samples))


# ---------------------------------------------------------------- plans


def apply_plan(clean: AudioBuffer, plan: DistortionPlan, clip: bool = True) -> AudioBuffer:
    """Apply the plan's distortions in order; clips to [-1, 1] at the end."""
    out = clean
    for index, spec in enumerate(plan.specs):
        seeds = np.random.SeedSequence([plan.seed, index]).spawn(2)
        if spec.additive:
            rng = np.random.default_rng(seeds[0])
            extra = int(rng.integers(0, out.sample_rate_hz // 10 + 1))
            noise = synth_noise(spec.kind, len(out) + extra, seeds[1], out.sample_rate_hz)
            out = mix_at_snr(out, noise, spec.snr_db, rng=rng, clip=False)
        elif spec.kind == "reverb":
            out = apply_reverb(out, spec.rt60_s, seeds[1])
        elif spec.kind == "pitch_shift":
            out = pitch_shift(out, spec.semitones)
        else:
            out = band_reject(out, spec.center_hz, spec.q)
    if clip:
        out = out.with_samples(np.clip(out.samples, -1.0, 1.0))
    return out


# ---------------------------------------------------------------- features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate_hz)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_centers_hz(n_mels: int, sample_rate_hz: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    return edges[1:-1]


def frame_count(n_samples: int, frame: int, hop: int) -> int:
    return (n_samples - frame) // hop + 1


def logmel_frontend(
    signal: AudioBuffer,
    n_mels: int = DEFAULT_N_MELS,
    frame_ms: float = DEFAULT_FRAME_MS,
    hop_ms: float = DEFAULT_HOP_MS,
) -> np.ndarray:
    """log(mel(|STFT|^2) + 1e-10) features, shape (T, n_mels)."""
    sr = signal.sample_rate_hz
    frame = int(round(sr * frame_ms / 1000.0))
    hop = int(round(sr * hop_ms / 1000.0))
    if frame < 1 or hop < 1:
        raise ContractError("frame and hop must span at least one sample")
    if len(signal) <= frame:
        raise ContractError(f"signal of {len(signal)} samples is too short for a {frame}-sample frame")
    n_fft = 1 << (frame - 1).bit_length()
    n_frames = frame_count(len(signal), frame, hop)
    frames = np.lib.stride_tricks.sliding_window_view(signal.samples, frame)[::hop][:n_frames]
    window = sps.get_window("hann", frame)
    power = np.abs(np.fft.rfft(frames * window, n=n_fft, axis=-1)) ** 2
    return np.log(power @ mel_filterbank(n_mels, n_fft, sr).T + LOG_FLOOR)


# ---------------------------------------------------------------- WAV I/O


def read_wav(path, expected_sample_rate: int | None = None) -> AudioBuffer:
    """Read a mono 16-bit PCM WAV file into [-1, 1) floats."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            comp = fh.getcomptype()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise ContractError(f"{path}: not a readable PCM WAV file ({exc})") from None
    if channels != 1:
        raise ContractError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2 or comp != "NONE":
        raise ContractError(f"{path}: expected 16-bit PCM, found {8 * width}-bit {comp}")
    if expected_sample_rate is not None and rate != expected_sample_rate:
        raise ContractError(f"{path}: sample rate {rate} Hz does not match configured {expected_sample_rate} Hz")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.round(np.clip(audio.samples, -1.0, 32767 / 32768) * 32768.0).astype("<i2")
    with wave.open(str(Path(path)), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(audio.sample_rate_hz)
        fh.writeframes(pcm.tobytes())
