"""Signal front end: resampling, log-power STFT, log-mel spectrograms and energy VAD."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List

import numpy as np
from scipy import signal
from scipy.io import wavfile

TARGET_RATE_HZ = 22050
LOG_FLOOR = 1e-10
DEFAULT_WINDOW_MS = 93.0
DEFAULT_HOP_MS = 23.0
DEFAULT_STFT_BINS = 512
DEFAULT_N_MELS = 128


class SpectrogramKind(str, enum.Enum):
    LOG_STFT = "stft"
    LOG_MEL = "lms"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def crop(self, start_seconds: float, end_seconds: float) -> "Waveform":
        lo = max(0, int(round(start_seconds * self.sample_rate_hz)))
        hi = min(len(self.samples), int(round(end_seconds * self.sample_rate_hz)))
        return Waveform(self.samples[lo:max(lo, hi)], self.sample_rate_hz)


@dataclass
class Spectrogram:
    frames: np.ndarray  # (S, F)
    hop_seconds: float
    kind: SpectrogramKind

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_features(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class VadSegment:
    start_seconds: float
    end_seconds: float

    @property
    def duration(self) -> float:
        return self.end_seconds - self.start_seconds


def read_wav(path) -> Waveform:
    """Read PCM WAV (int16/int32/uint8/float); multi-channel files keep the first channel."""
    rate, data = wavfile.read(path)
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    return Waveform(x, rate)


def write_wav(path, wav: Waveform, pcm16: bool = True) -> None:
    if pcm16:
        data = np.clip(np.round(wav.samples * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = wav.samples.astype(np.float32)
    wavfile.write(path, wav.sample_rate_hz, data)


def resample(wav: Waveform, target_rate_hz: int = TARGET_RATE_HZ) -> Waveform:
    if len(wav.samples) == 0:
        raise ValueError("empty waveform")
    if wav.sample_rate_hz == target_rate_hz:
        return Waveform(wav.samples.copy(), target_rate_hz)
    ratio = Fraction(target_rate_hz, wav.sample_rate_hz)
    # polyphase FIR; its default Kaiser low-pass sits at the lower of the two Nyquist rates
    y = signal.resample_poly(wav.samples, ratio.numerator, ratio.denominator)
    return Waveform(y, target_rate_hz)


def ms_to_pow2_samples(ms: float, sample_rate_hz: int) -> int:
    """Nearest power of two to a duration in samples (93 ms -> 2048, 23 ms -> 512 at 22.05 kHz)."""
    n = ms * sample_rate_hz / 1000.0
    if n < 1:
        raise ValueError(f"{ms} ms is shorter than one sample at {sample_rate_hz} Hz")
    return 1 << int(round(math.log2(n)))


def frame_count(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        return 0
    return 1 + (n_samples - win) // hop


def _frames(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = frame_count(len(x), win, hop)
    if n == 0:
        return np.zeros((0, win))
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n]


def power_spectrum(wav: Waveform, win: int, hop: int) -> np.ndarray:
    """|rfft|^2 of Hann-windowed frames, shape (S, win // 2 + 1). No end padding."""
    window = signal.get_window("hann", win)
    frames = _frames(wav.samples, win, hop)
    if frames.shape[0] == 0:
        return np.zeros((0, win // 2 + 1))
    spec = np.fft.rfft(frames * window, n=win, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def _window_hop(wav: Waveform, window_ms, hop_ms, win_samples, hop_samples):
    win = win_samples or ms_to_pow2_samples(window_ms, wav.sample_rate_hz)
    hop = hop_samples or ms_to_pow2_samples(hop_ms, wav.sample_rate_hz)
    return win, hop


def stft_log_power(
    wav: Waveform,
    window_ms: float = DEFAULT_WINDOW_MS,
    hop_ms: float = DEFAULT_HOP_MS,
    out_bins: int = DEFAULT_STFT_BINS,
    win_samples: int | None = None,
    hop_samples: int | None = None,
) -> Spectrogram:
    """Natural-log power spectrogram keeping the lowest ``out_bins`` FFT bins."""
    win, hop = _window_hop(wav, window_ms, hop_ms, win_samples, hop_samples)
    if out_bins > win // 2 + 1:
        raise ValueError(f"out_bins={out_bins} exceeds the {win // 2 + 1} available FFT bins")
    power = power_spectrum(wav, win, hop)[:, :out_bins]
    return Spectrogram(np.log(power + LOG_FLOOR), hop / wav.sample_rate_hz, SpectrogramKind.LOG_STFT)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate_hz: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int = DEFAULT_N_MELS, n_fft_bins: int = 1025,
                   sample_rate_hz: int = TARGET_RATE_HZ) -> np.ndarray:
    """Peak-normalised triangular mel filters spanning 0 Hz to Nyquist, shape (n_mels, n_fft_bins)."""
    if n_mels < 2:
        raise ValueError("n_mels must be at least 2")
    if n_mels > n_fft_bins:
        raise ValueError("filterbank overdetermined")
    nyquist = sample_rate_hz / 2.0
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), n_mels + 2))
    freqs = np.linspace(0.0, nyquist, n_fft_bins)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    for i in range(n_mels):
        peak = fb[i].max()
        if peak > 0:
            fb[i] /= peak
        else:
            # filter narrower than the bin spacing: snap to the nearest bin
            fb[i, int(np.argmin(np.abs(freqs - edges[i + 1])))] = 1.0
    return fb


def log_mel(
    wav: Waveform,
    n_mels: int = DEFAULT_N_MELS,
    window_ms: float = DEFAULT_WINDOW_MS,
    hop_ms: float = DEFAULT_HOP_MS,
    win_samples: int | None = None,
    hop_samples: int | None = None,
) -> Spectrogram:
    win, hop = _window_hop(wav, window_ms, hop_ms, win_samples, hop_samples)
    power = power_spectrum(wav, win, hop)
    fb = mel_filterbank(n_mels, win // 2 + 1, wav.sample_rate_hz)
    return Spectrogram(np.log(power @ fb.T + LOG_FLOOR), hop / wav.sample_rate_hz, SpectrogramKind.LOG_MEL)


def spectrogram(wav: Waveform, kind: SpectrogramKind | str, n_mels: int = DEFAULT_N_MELS,
                out_bins: int = DEFAULT_STFT_BINS, window_ms: float = DEFAULT_WINDOW_MS,
                hop_ms: float = DEFAULT_HOP_MS) -> Spectrogram:
    kind = SpectrogramKind(kind)
    if kind is SpectrogramKind.LOG_MEL:
        return log_mel(wav, n_mels, window_ms, hop_ms)
    return stft_log_power(wav, window_ms, hop_ms, out_bins)


def vad_energy(
    wav: Waveform,
    frame_ms: float = 30.0,
    rel_threshold_db: float = 30.0,
    min_segment_s: float = 0.2,
    merge_gap_s: float = 0.3,
) -> List[VadSegment]:
    """Energy VAD on non-overlapping frames, thresholded relative to the loudest frame.

    The last partial frame is kept so segments can reach the end of the clip.
    """
    if len(wav.samples) == 0:
        raise ValueError("empty waveform")
    sr = wav.sample_rate_hz
    flen = max(1, int(round(frame_ms * sr / 1000.0)))
    n = len(wav.samples)
    n_frames = -(-n // flen)
    padded = np.zeros(n_frames * flen)
    padded[:n] = wav.samples
    sq = padded.reshape(n_frames, flen) ** 2
    counts = np.full(n_frames, flen, dtype=np.float64)
    counts[-1] = n - (n_frames - 1) * flen
    rms = np.sqrt(sq.sum(axis=1) / counts)
    if rms.max() <= 0.0:
        return []
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(rms)
    active = (rms > 0.0) & (db > db.max() - rel_threshold_db)

    runs = []
    i = 0
    while i < n_frames:
        if not active[i]:
            i += 1
            continue
        j = i
        while j + 1 < n_frames and active[j + 1]:
            j += 1
        runs.append([i * flen / sr, min((j + 1) * flen, n) / sr])
        i = j + 1

    merged: list = []
    for start, end in runs:
        if merged and start - merged[-1][1] < merge_gap_s:
            merged[-1][1] = end
        else:
            merged.append([start, end])
    return [VadSegment(s, e) for s, e in merged if e - s >= min_segment_s]
