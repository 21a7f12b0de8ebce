"""Log-Mel frontend: WAV ingest, filterbank features, and normalization."""

from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

LOG_FLOOR = 1e-10       # added inside the log to avoid -inf on silent frames
STD_FLOOR = 1e-8        # channels below this std are mapped to zeros
FEATURE_MAGIC = b"NPCF"
FEATURE_VERSION = 1


class FeatureError(Exception):
    """Base class for frontend failures."""


class NonMonoError(FeatureError):
    """WAV file has more than one channel."""


class UnsupportedEncodingError(FeatureError):
    """WAV payload is not 16-bit PCM."""


class SignalTooShortError(FeatureError):
    """Signal shorter than one analysis window."""


class MissingStatsError(FeatureError):
    """Speaker-mode normalization requested without precomputed stats."""


class FeatureFileError(FeatureError):
    """Malformed feature file (bad magic, version, or truncation)."""


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray     # float amplitudes in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        if self.samples.size == 0:
            raise FeatureError("empty signal")
        if self.sample_rate <= 0:
            raise FeatureError("sample_rate must be positive")


@dataclass(frozen=True)
class FrameParams:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 80
    fft_size: Optional[int] = None   # default: next power of two >= window length

    def __post_init__(self):
        if not (0 < self.hop_ms <= self.window_ms):
            raise FeatureError("need 0 < hop_ms <= window_ms")
        if self.n_mels < 1:
            raise FeatureError("n_mels must be >= 1")

    def window_length(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.window_ms / 1000.0))

    def hop_length(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.hop_ms / 1000.0))


@dataclass
class FeatureSequence:
    frames: np.ndarray      # (T, d_in) float32
    utterance_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def d_in(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    wav_path: str
    speaker_id: str
    label_path: Optional[str] = None


def load_wav(path: str) -> AudioSignal:
    """Read a 16-bit PCM mono WAV file, scaling samples by 1/32768."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with wave.open(path, "rb") as wf:
        if wf.getnchannels() != 1:
            raise NonMonoError(f"{path}: {wf.getnchannels()} channels, expected mono")
        if wf.getsampwidth() != 2 or wf.getcomptype() != "NONE":
            raise UnsupportedEncodingError(f"{path}: expected uncompressed 16-bit PCM")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioSignal(samples=pcm.astype(np.float64) / 32768.0, sample_rate=rate)


def write_wav(path: str, samples: np.ndarray, sample_rate: int) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM mono WAV."""
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(path, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters, (n_mels, fft_size//2 + 1), spanning 0..Nyquist."""
    n_bins = fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bin_hz - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    return edges[1:-1]


def frame_count(n_samples: int, window: int, hop: int) -> int:
    return (n_samples - window) // hop + 1


def log_mel(signal: AudioSignal, params: FrameParams = FrameParams()) -> FeatureSequence:
    """Log mel-filterbank energies, one row per frame."""
    win = params.window_length(signal.sample_rate)
    hop = params.hop_length(signal.sample_rate)
    n = signal.samples.shape[0]
    if n < win:
        raise SignalTooShortError(f"{n} samples < window {win}")
    fft_size = params.fft_size
    if fft_size is None:
        fft_size = 1
        while fft_size < win:
            fft_size *= 2
    elif fft_size < win:
        raise FeatureError("fft_size smaller than window length")

    T = frame_count(n, win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    frames = signal.samples[idx] * np.hanning(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=fft_size, axis=1)) ** 2
    fb = mel_filterbank(params.n_mels, fft_size, signal.sample_rate)
    energies = power @ fb.T
    out = np.log(energies + LOG_FLOOR).astype(np.float32)
    return FeatureSequence(frames=out)


def normalize(
    feat: FeatureSequence,
    mode: str = "utterance",
    speaker_stats: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> FeatureSequence:
    """Zero-mean unit-variance per channel; scope is the utterance or the speaker.

    Uses population variance. Channels with std below STD_FLOOR become zeros.
    """
    x = feat.frames.astype(np.float64)
    if mode == "utterance":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
    elif mode == "speaker":
        if speaker_stats is None:
            raise MissingStatsError("speaker normalization needs precomputed stats")
        mean, std = speaker_stats
    else:
        raise FeatureError(f"unknown normalization mode {mode!r}")
    out = np.where(std < STD_FLOOR, 0.0, (x - mean) / np.where(std < STD_FLOOR, 1.0, std))
    return FeatureSequence(frames=out.astype(np.float32), utterance_id=feat.utterance_id)


def speaker_statistics(feats: list[FeatureSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std pooled over all frames of one speaker's utterances."""
    stacked = np.concatenate([f.frames.astype(np.float64) for f in feats], axis=0)
    return stacked.mean(axis=0), stacked.std(axis=0)


def write_feature_file(path: str, feat: FeatureSequence) -> None:
    """Binary feature file: magic, version, T, d_in, then row-major float32."""
    data = feat.frames.astype("<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, data.shape[0], data.shape[1]))
        f.write(data.tobytes())


def read_feature_file(path: str, utterance_id: str = "") -> FeatureSequence:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise FeatureFileError(f"{path}: bad magic {magic!r}")
        version, T, d_in = struct.unpack("<III", f.read(12))
        if version != FEATURE_VERSION:
            raise FeatureFileError(f"{path}: unsupported version {version}")
        payload = f.read(4 * T * d_in)
        if len(payload) != 4 * T * d_in:
            raise FeatureFileError(f"{path}: truncated payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(T, d_in)
    return FeatureSequence(frames=frames.copy(), utterance_id=utterance_id)


def read_manifest(path: str) -> list[ManifestEntry]:
    """TSV manifest: utterance_id, wav_path, speaker_id, optional label path."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    entries = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 3:
                raise FeatureError(f"{path}:{line_no}: expected >= 3 tab-separated columns")
            label = cols[3] if len(cols) > 3 and cols[3] else None
            wav = cols[1] if os.path.isabs(cols[1]) else os.path.join(base, cols[1])
            if label is not None and not os.path.isabs(label):
                label = os.path.join(base, label)
            entries.append(ManifestEntry(cols[0], wav, cols[2], label))
    return entries


def read_frame_labels(path: str) -> np.ndarray:
    """Frame labels: one integer per line."""
    with open(path, "r", encoding="utf-8") as f:
        return np.array([int(s) for s in f.read().split()], dtype=np.int64)
