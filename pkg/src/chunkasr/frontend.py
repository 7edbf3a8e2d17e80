"""Audio frontend: WAV input, 80-dim log-mel filterbank features, feature files.

The frontend is deliberately dependency-free and bit-stable: Hamming window,
25 ms windows (400 samples at 16 kHz) with a 10 ms shift (160 samples), HTK
mel scale over 0-8000 Hz, natural-log energies floored at log(1e-10). No
pre-emphasis, no dither, no mean/variance normalization.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
WINDOW_SAMPLES = 400
HOP_SAMPLES = 160
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"CFKF"
FEATURE_VERSION = 1


class AudioFormatError(ValueError):
    """Input audio is not 16 kHz / 16-bit / mono RIFF PCM."""


class FeatureFormatError(ValueError):
    """Feature container is malformed (bad magic, dims, or truncated payload)."""


@dataclass
class PcmAudio:
    samples: np.ndarray  # int16, mono
    sample_rate: int = SAMPLE_RATE


@dataclass
class FeatureMatrix:
    """T x 80 log-mel frames; 10 ms shift, 25 ms analysis window."""

    frames: np.ndarray

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise FeatureFormatError(
                f"feature matrix must be T x {N_MELS}, got {self.frames.shape}"
            )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def read_wav(path) -> PcmAudio:
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            data = wf.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a readable RIFF PCM WAV ({exc})") from None
    if n_channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {n_channels} channels")
    if sampwidth != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * sampwidth}-bit")
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate}")
    samples = np.frombuffer(data, dtype="<i2")
    return PcmAudio(samples=samples, sample_rate=rate)


def write_wav(path, samples: np.ndarray) -> None:
    """Write mono 16 kHz 16-bit PCM (test/demo convenience)."""
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(np.asarray(samples, dtype="<i2").tobytes())


def num_frames(n_samples: int) -> int:
    """Frame count for an n-sample signal: 1 + floor((n - 400) / 160)."""
    if n_samples < WINDOW_SAMPLES:
        raise AudioFormatError(
            f"audio too short: {n_samples} samples < one {WINDOW_SAMPLES}-sample window"
        )
    return 1 + (n_samples - WINDOW_SAMPLES) // HOP_SAMPLES


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE,
                   f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    """Triangular mel filters as an (n_mels, n_fft//2 + 1) matrix."""
    n_bins = n_fft // 2 + 1
    mel_points = np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bin_freqs = np.arange(n_bins) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


_FBANK_CACHE: dict[tuple, np.ndarray] = {}


def compute_fbank(audio: PcmAudio) -> FeatureMatrix:
    """Log-mel filterbank features for one audio.

    T = 1 + floor((num_samples - 400) / 160); trailing samples of less than
    one hop never start a new frame, so zero-padding by under 160 samples
    leaves the output unchanged.
    """
    if audio.sample_rate != SAMPLE_RATE:
        raise AudioFormatError(f"expected {SAMPLE_RATE} Hz, got {audio.sample_rate}")
    n = len(audio.samples)
    t = num_frames(n)
    x = np.asarray(audio.samples, dtype=np.float64) / 32768.0
    starts = np.arange(t) * HOP_SAMPLES
    frames = x[starts[:, None] + np.arange(WINDOW_SAMPLES)[None, :]]
    key = ("win", WINDOW_SAMPLES)
    if key not in _FBANK_CACHE:
        _FBANK_CACHE[key] = np.hamming(WINDOW_SAMPLES)
    frames = frames * _FBANK_CACHE[key]
    spec = np.fft.rfft(frames, n=N_FFT, axis=1)
    power = spec.real**2 + spec.imag**2
    if "mel" not in _FBANK_CACHE:
        _FBANK_CACHE["mel"] = mel_filterbank()
    energies = power @ _FBANK_CACHE["mel"].T
    feats = np.log(np.maximum(energies, LOG_FLOOR))
    return FeatureMatrix(frames=feats.astype(np.float32))


def save_features(path, frames: np.ndarray) -> None:
    """Write a T x dim float32 matrix in the feature container format."""
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise FeatureFormatError(f"expected a 2-D matrix, got shape {frames.shape}")
    t, dim = frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, dim))
        fh.write(frames.tobytes())


def load_features(path) -> np.ndarray:
    """Read a feature container; byte-exact round trip with save_features."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic, not a feature container")
    version, t, dim = struct.unpack_from("<III", blob, 4)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * t * dim
    if len(blob) != expected:
        raise FeatureFormatError(
            f"{path}: payload length {len(blob) - 16} bytes does not match "
            f"header {t} x {dim} float32"
        )
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(t, dim).copy()
