"""Stage wiring: audio -> spectrograms -> pretraining pairs -> encoder -> response embeddings -> detector -> metrics."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import dsp
from .config import RunConfig
from .detector import (Detector, PatientSequence, Prediction, fit_standardizer, predict, save_detector,
                       train_detector, write_predictions)
from .embedding import ResponseSegment, extract_depa_sequence, higher_order_stats
from .formats import load_frame_features
from .manifest import ClipRecord, Manifest, ingest_manifest
from .metrics import (ClassificationReport, RegressionReport, classification_report, format_csv, format_text,
                      regression_report)
from .pretrain import (Checkpoint, PretrainDiverged, load_checkpoint, model_from_checkpoint, pretrain,
                       random_checkpoint, save_checkpoint, write_loss_csv)
from .slicing import TrainingSample, slice_clip

log = logging.getLogger(__name__)

RUN_DIR_ENV = "DEPA_RUN_DIR"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PrepareStats:
    clips: int = 0
    skipped: int = 0
    vad_invocations: int = 0
    segments: int = 0
    samples: int = 0


def _map_clips(fn: Callable, clips: List[ClipRecord], workers: int) -> list:
    clips = sorted(clips, key=lambda c: c.clip_id)
    if workers <= 1:
        return [fn(c) for c in clips]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, clips))


def load_audio(rec: ClipRecord, cfg: RunConfig) -> dsp.Waveform:
    return dsp.resample(dsp.read_wav(rec.audio), cfg.features.sample_rate)


def response_spans(rec: ClipRecord, wav: dsp.Waveform, cfg: RunConfig, stats: Optional[PrepareStats] = None):
    """Participant segments from the manifest, or energy VAD when the clip has none."""
    if rec.segments:
        return [(s.start_seconds, s.end_seconds) for s in rec.responses]
    if not cfg.vad.enabled:
        raise ValueError(f"clip {rec.clip_id} has no segments and VAD is disabled")
    if stats is not None:
        stats.vad_invocations += 1
    v = cfg.vad
    segs = dsp.vad_energy(wav, v.frame_ms, v.rel_threshold_db, v.min_segment_s, v.merge_gap_s)
    return [(s.start_seconds, s.end_seconds) for s in segs]


def features_for(wav: dsp.Waveform, cfg: RunConfig) -> np.ndarray:
    f = cfg.features
    spec = dsp.spectrogram(wav, f.kind, n_mels=f.n_mels, out_bins=f.out_bins, window_ms=f.window_ms, hop_ms=f.hop_ms)
    return spec.frames


def prepare_pretrain_data(manifest: Manifest, cfg: RunConfig) -> Tuple[List[TrainingSample], PrepareStats]:
    """Slice every usable response of the selected splits into context/center pairs."""
    slicing = cfg.slice_config()
    clips = [c for c in manifest.clips if c.split in cfg.pipeline.pretrain_splits]
    stats = PrepareStats()

    def work(rec: ClipRecord):
        local = PrepareStats(clips=1)
        try:
            wav = load_audio(rec, cfg)
        except (OSError, ValueError) as exc:
            log.warning("skipping clip %s: %s", rec.clip_id, exc)
            local.skipped = 1
            return [], local
        out: List[TrainingSample] = []
        for start, end in response_spans(rec, wav, cfg, local):
            frames = features_for(wav.crop(start, end), cfg)
            if frames.shape[0] == 0:
                continue
            local.segments += 1
            for s in slice_clip(frames, slicing, rec.clip_id):
                s.sample_index = len(out)
                out.append(s)
        local.samples = len(out)
        return out, local

    samples: List[TrainingSample] = []
    for part, local in _map_clips(work, clips, cfg.run.workers):
        samples.extend(part)
        for k in ("clips", "skipped", "vad_invocations", "segments", "samples"):
            setattr(stats, k, getattr(stats, k) + getattr(local, k))
    if stats.clips and stats.skipped == stats.clips:
        raise RuntimeError("all clips were unreadable")
    log.info("pretraining pairs: %d samples from %d segments in %d clips (%d skipped, VAD on %d)",
             stats.samples, stats.segments, stats.clips, stats.skipped, stats.vad_invocations)
    return samples, stats


def patient_responses(rec: ClipRecord, cfg: RunConfig) -> List[ResponseSegment]:
    wav = load_audio(rec, cfg)
    out = []
    for start, end in response_spans(rec, wav, cfg):
        frames = features_for(wav.crop(start, end), cfg)
        if frames.shape[0] == 0:
            log.warning("clip %s: response at %.2fs is shorter than one analysis window, dropped", rec.clip_id, start)
            continue
        out.append(ResponseSegment(rec.clip_id, len(out), frames, start, end))
    if not out:
        raise ValueError(f"clip {rec.clip_id} has no usable responses")
    return out


def _hcvp_rows(rec: ClipRecord) -> np.ndarray:
    rows = []
    for s in rec.responses:
        if not s.frame_features:
            raise ValueError(f"clip {rec.clip_id}: hcvp features need frame_features on every participant segment")
        rows.append(higher_order_stats(load_frame_features(s.frame_features)))
    if not rows:
        raise ValueError(f"clip {rec.clip_id} has no participant segments")
    return np.stack(rows)


def build_sequences(manifest: Manifest, cfg: RunConfig, checkpoint: Optional[Checkpoint]) -> Dict[str, PatientSequence]:
    mode = cfg.pipeline.features
    model = model_from_checkpoint(checkpoint) if mode == "depa" else None

    def work(rec: ClipRecord) -> PatientSequence:
        if mode == "hcvp":
            feats = _hcvp_rows(rec)
        else:
            responses = patient_responses(rec, cfg)
            if mode == "depa":
                feats = np.stack(extract_depa_sequence(model, responses))
            else:
                feats = np.concatenate([r.spectrogram for r in responses], axis=0)
        return PatientSequence(rec.clip_id, feats, rec.phq8_binary, rec.phq8_score)

    return {p.patient_id: p for p in _map_clips(work, manifest.clips, cfg.run.workers)}


@dataclass
class RunResult:
    classification: ClassificationReport
    regression: RegressionReport
    predictions: Dict[str, Prediction]
    run_dir: str
    pretrain_trace: List[float] = field(default_factory=list)
    detector_trace: List[float] = field(default_factory=list)


def resolve_run_dir(cfg: RunConfig) -> str:
    return os.environ.get(RUN_DIR_ENV) or cfg.run.run_dir


def obtain_encoder(manifest: Manifest, cfg: RunConfig, run_dir: str) -> Checkpoint:
    slicing = cfg.slice_config()
    if cfg.pipeline.encoder == "random":
        ckpt = random_checkpoint(slicing, cfg.encoder, cfg.decoder, seed=cfg.pretrain.seed)
    elif cfg.pipeline.pretrain:
        samples, _ = prepare_pretrain_data(manifest, cfg)
        try:
            ckpt = pretrain(samples, cfg.pretrain, cfg.encoder, cfg.decoder, slicing, log_every=10)
        except PretrainDiverged as exc:
            save_checkpoint(exc.checkpoint, os.path.join(run_dir, "encoder.ckpt"))
            raise
        write_loss_csv(os.path.join(run_dir, "pretrain_loss.csv"), ckpt.loss_trace)
    elif cfg.pipeline.checkpoint and os.path.exists(cfg.pipeline.checkpoint):
        ckpt = load_checkpoint(cfg.pipeline.checkpoint)
    else:
        raise RuntimeError("no encoder available")
    if ckpt.n_features != cfg.features.dim:
        raise ValueError("feature dimension mismatch between encoder checkpoint and feature config")
    save_checkpoint(ckpt, os.path.join(run_dir, "encoder.ckpt"))
    return ckpt


def run_end_to_end(cfg: RunConfig, manifest: Optional[Manifest] = None, run_dir: Optional[str] = None) -> RunResult:
    run_dir = run_dir or resolve_run_dir(cfg)
    os.makedirs(run_dir, exist_ok=True)
    resolved = cfg.to_ini()
    log.info("resolved configuration:\n%s", resolved)
    with open(os.path.join(run_dir, "config.ini"), "w") as f:
        f.write(resolved)

    def stage(name, fn, *args):
        try:
            return fn(*args)
        except PretrainDiverged:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc

    if manifest is None:
        manifest = stage("manifest", ingest_manifest, cfg.run.manifest, cfg.vad.enabled)

    ckpt = None
    if cfg.pipeline.features == "depa":
        ckpt = stage("pretrain", obtain_encoder, manifest, cfg, run_dir)
    sequences = stage("embed", build_sequences, manifest, cfg, ckpt)

    train = [sequences[c.clip_id] for c in sorted(manifest.split("train"), key=lambda c: c.clip_id)]
    dev = [sequences[c.clip_id] for c in sorted(manifest.split("dev"), key=lambda c: c.clip_id)]
    if not dev:
        raise StageError("evaluate", ValueError("manifest has no dev clips"))

    def fit():
        std = fit_standardizer(train)
        return train_detector(train, cfg.detector, std, log_every=10)

    det: Detector = stage("train-detector", fit)
    save_detector(det, os.path.join(run_dir, "detector.ckpt"))
    write_loss_csv(os.path.join(run_dir, "detector_loss.csv"), det.loss_trace)

    preds = [predict(det, p) for p in dev]
    write_predictions(os.path.join(run_dir, "predictions.csv"), [p.patient_id for p in dev], preds)
    creport, rreport = evaluate_predictions(dev, preds)
    with open(os.path.join(run_dir, "metrics.txt"), "w") as f:
        f.write(format_text(creport, rreport))
    with open(os.path.join(run_dir, "metrics.csv"), "w") as f:
        f.write(format_csv(creport, rreport))
    log.info("dev macro F1 %.3f  MAE %.3f  RMSE %.3f", creport.macro_f1, rreport.mae, rreport.rmse)
    return RunResult(creport, rreport, {p.patient_id: q for p, q in zip(dev, preds)}, run_dir,
                     ckpt.loss_trace if ckpt else [], det.loss_trace)


def evaluate_predictions(patients: List[PatientSequence], preds: List[Prediction]):
    if any(p.y_c is None for p in patients):
        raise ValueError("evaluation patients need labels")
    creport = classification_report([q.binary for q in preds], [p.y_c for p in patients])
    rreport = regression_report([q.phq8_estimate for q in preds], [p.y_r for p in patients])
    return creport, rreport
