"""Synthetic interview corpus with a planted depression signal.

Each patient is one WAV "interview": interviewer prompts alternate with
participant responses of 0.5-5 s. Responses are harmonic, syllable-like voiced
bursts. Severity (PHQ-8 / 24) lowers the fundamental, lowers loudness and
lengthens the pauses between syllables. A per-patient recording gain and a
constant noise floor act as nuisance factors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List

import numpy as np

from .dsp import Waveform, write_wav
from .manifest import ClipRecord, Segment, write_manifest

SAMPLE_RATE = 22050
NOISE_RMS = 10 ** (-55 / 20)


@dataclass(frozen=True)
class SynthParams:
    f0_healthy: float = 220.0
    f0_drop: float = 100.0  # Hz lost at maximum severity
    f0_jitter: float = 6.0  # per-patient std, Hz
    level_drop: float = 0.55  # fractional amplitude loss at maximum severity
    gain_db: float = 3.0  # per-patient recording gain, uniform in [-gain_db, gain_db]
    pause_gain: float = 3.0  # pause lengthening factor at maximum severity


def _voiced(rng: np.random.Generator, dur: float, f0: float, amp: float, sr: int,
            n_harmonics: int = 12, tilt: float = 1.0) -> np.ndarray:
    n = max(1, int(dur * sr))
    t = np.arange(n) / sr
    contour = f0 * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(contour) / sr
    x = np.zeros(n)
    for h in range(1, n_harmonics + 1):
        if h * f0 >= sr / 2:
            break
        x += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h ** tilt
    x /= np.sqrt(np.mean(x ** 2)) + 1e-12
    return amp * x * np.hanning(n)


def _response(rng, dur: float, f0: float, amp: float, pause_scale: float, sr: int) -> np.ndarray:
    out = np.zeros(int(dur * sr))
    pos = 0
    while pos < len(out):
        syl = _voiced(rng, rng.uniform(0.12, 0.35), f0 * rng.uniform(0.92, 1.08), amp * rng.uniform(0.7, 1.0), sr)
        end = min(len(out), pos + len(syl))
        out[pos:end] += syl[: end - pos]
        pos = end + int(rng.uniform(0.03, 0.12) * pause_scale * sr)
    return out


def synth_patient(rng: np.random.Generator, y_r: float, n_responses: int, sr: int = SAMPLE_RATE,
                  params: SynthParams = SynthParams()):
    """Return (waveform samples, list of Segment) for one synthetic interview."""
    severity = y_r / 24.0
    f0 = params.f0_healthy - params.f0_drop * severity + rng.normal(0, params.f0_jitter)
    gain = 10 ** (rng.uniform(-params.gain_db, params.gain_db) / 20)
    amp = 0.25 * (1.0 - params.level_drop * severity) * gain
    pause_scale = 1.0 + params.pause_gain * severity

    pieces: List[np.ndarray] = []
    segments: List[Segment] = []
    cursor = 0

    def put(x):
        nonlocal cursor
        pieces.append(x)
        cursor += len(x)

    put(np.zeros(int(0.3 * sr)))
    for _ in range(n_responses):
        q = _voiced(rng, rng.uniform(0.8, 1.5), 140.0 * rng.uniform(0.95, 1.05), 0.2, sr, n_harmonics=6, tilt=0.6)
        start = cursor
        put(q)
        segments.append(Segment(start / sr, cursor / sr, "interviewer"))
        put(np.zeros(int(rng.uniform(0.3, 0.8) * pause_scale ** 0.5 * sr)))
        dur = rng.uniform(0.5, 5.0)
        start = cursor
        put(_response(rng, dur, f0, amp, pause_scale, sr))
        segments.append(Segment(start / sr, cursor / sr, "participant"))
        put(np.zeros(int(rng.uniform(0.3, 0.6) * sr)))
    x = np.concatenate(pieces)
    x = x + rng.normal(0, NOISE_RMS, len(x))
    return np.clip(x, -1.0, 1.0), segments


def generate_synthetic_corpus(n_patients: int, seed: int, out_dir, train_fraction: float = 0.7,
                              sample_rate: int = SAMPLE_RATE, params: SynthParams = SynthParams()) -> str:
    """Write ``audio/*.wav`` and ``manifest.jsonl`` under ``out_dir``; returns the manifest path.

    Labels are balanced (within one of half depressed) and the train/dev split is
    stratified by class.
    """
    if n_patients < 4:
        raise ValueError("need at least 4 synthetic patients")
    rng = np.random.default_rng(seed)
    audio_dir = os.path.join(out_dir, "audio")
    os.makedirs(audio_dir, exist_ok=True)

    labels = np.array([1] * (n_patients // 2) + [0] * (n_patients - n_patients // 2))
    rng.shuffle(labels)
    split = np.empty(n_patients, dtype=object)
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        n_train = int(round(train_fraction * len(idx)))
        split[idx] = "dev"
        split[idx[:n_train]] = "train"

    clips = []
    for i in range(n_patients):
        y_c = int(labels[i])
        y_r = float(rng.integers(10, 25) if y_c else rng.integers(0, 10))
        n_resp = int(rng.integers(5, 21))
        x, segs = synth_patient(np.random.default_rng([seed, i]), y_r, n_resp, sample_rate, params)
        clip_id = f"P{i:03d}"
        path = os.path.join(audio_dir, f"{clip_id}.wav")
        write_wav(path, Waveform(x, sample_rate))
        clips.append(ClipRecord(clip_id, path, str(split[i]), segs, y_c, y_r))
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(manifest_path, clips)
    return manifest_path
