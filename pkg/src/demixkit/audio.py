"""Waveform I/O and 20-dimensional MFCC features."""

from __future__ import annotations

import io
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window

from demixkit.errors import DataError, SegmentTooShortError, UsageError, WavFormatError

SAMPLE_RATE = 16000
FRAME_LENGTH = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
N_FFT = 512
N_MELS = 40
MEL_LOW_HZ = 20.0
MEL_HIGH_HZ = 7600.0
N_CEPS = 20
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise UsageError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise UsageError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.isfinite(self.samples).all():
            raise DataError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != N_CEPS:
            raise UsageError(f"feature matrix must be T x {N_CEPS}, got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise SegmentTooShortError("feature matrix has no frames")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def read_wav(path: str | Path) -> Waveform:
    """Read 16-bit PCM WAV; stereo is averaged down to mono."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, nframes = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: malformed WAV header ({exc})") from exc
    if width != 2:
        raise WavFormatError(f"{path}: unsupported sample width {8 * width} bits (need 16-bit PCM)")
    if channels not in (1, 2):
        raise WavFormatError(f"{path}: unsupported channel count {channels}")
    if nframes == 0:
        raise WavFormatError(f"{path}: empty audio")
    if len(raw) != nframes * channels * width:
        raise WavFormatError(f"{path}: malformed header, data chunk shorter than declared")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        pcm = pcm.reshape(-1, 2).mean(axis=1)
    return Waveform(pcm, rate)


def wav_bytes(w: Waveform) -> bytes:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(path: str | Path, w: Waveform) -> None:
    """Write mono 16-bit PCM; samples outside [-1, 1) are clipped."""
    Path(path).write_bytes(wav_bytes(w))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, rate: int = SAMPLE_RATE,
                   low: float = MEL_LOW_HZ, high: float = MEL_HIGH_HZ) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters equally spaced on the HTK mel scale."""
    edges = mel_to_hz(np.linspace(hz_to_mel(low), hz_to_mel(high), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * rate / n_fft
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        left, center, right = edges[m : m + 3]
        rising = (bins - left) / (center - left)
        falling = (right - bins) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def num_frames(n_samples: int) -> int:
    return 0 if n_samples < FRAME_LENGTH else (n_samples - FRAME_LENGTH) // FRAME_SHIFT + 1


def mfcc(w: Waveform, mean_normalize: bool = True) -> FeatureMatrix:
    """20 MFCCs per 25 ms frame, 10 ms hop.

    Hann window, 512-point FFT power spectrum, 40 mel filters over
    20-7600 Hz, natural log floored at 1e-10, orthonormal DCT-II keeping
    c0..c19, then per-utterance cepstral mean subtraction.
    """
    if w.sample_rate != SAMPLE_RATE:
        raise DataError(f"mfcc expects {SAMPLE_RATE} Hz audio, got {w.sample_rate} Hz (resample first)")
    T = num_frames(len(w))
    if T < 1:
        raise SegmentTooShortError(f"{len(w)} samples is shorter than one {FRAME_LENGTH}-sample frame")
    idx = np.arange(FRAME_LENGTH)[None, :] + FRAME_SHIFT * np.arange(T)[:, None]
    frames = w.samples[idx] * get_window("hann", FRAME_LENGTH)
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    energies = power @ mel_filterbank().T
    logmel = np.log(np.maximum(energies, LOG_FLOOR))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :N_CEPS]
    if mean_normalize:
        ceps = ceps - ceps.mean(axis=0)
    return FeatureMatrix(np.ascontiguousarray(ceps))


def sample_segment(f: FeatureMatrix, length_frames: int, rng: np.random.Generator) -> FeatureMatrix:
    """Contiguous random crop of exactly ``length_frames`` rows."""
    start = sample_segment_start(f.num_frames, length_frames, rng)
    return FeatureMatrix(f.frames[start : start + length_frames], f.frame_shift_ms, f.frame_length_ms)


def sample_segment_start(total_frames: int, length_frames: int, rng: np.random.Generator) -> int:
    if length_frames < 1:
        raise UsageError(f"segment length must be positive, got {length_frames}")
    if total_frames < length_frames:
        raise SegmentTooShortError(f"utterance has {total_frames} frames, need {length_frames}")
    return int(rng.integers(0, total_frames - length_frames + 1))
