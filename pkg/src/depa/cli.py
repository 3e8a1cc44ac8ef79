"""Command line entry point: ``depa <subcommand> [options]``.

Every stage reads and writes under one run directory (``--out-dir``, else
``$DEPA_RUN_DIR``, else ``[run] run_dir``), so stages can be chained by hand or
all at once with ``run-all``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from . import formats
from .config import ConfigError, RunConfig, load_config, parse_ini
from .detector import (PatientSequence, fit_standardizer, load_detector, predict, save_detector, train_detector,
                       write_predictions)
from .manifest import Manifest, ingest_manifest
from .metrics import format_csv, format_text
from .pipeline import (StageError, build_sequences, evaluate_predictions, features_for, load_audio,
                       prepare_pretrain_data, resolve_run_dir, response_spans, run_end_to_end)
from .pretrain import PretrainDiverged, load_checkpoint, pretrain, save_checkpoint, write_loss_csv
from .slicing import TrainingSample
from .synth import generate_synthetic_corpus

log = logging.getLogger("depa")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


def _overrides_to_ini(pairs: List[str]) -> str:
    sections: Dict[str, List[str]] = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        sections.setdefault(section.strip(), []).append(f"{name.strip()} = {value}")
    return "\n".join(f"[{s}]\n" + "\n".join(lines) for s, lines in sections.items())


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig.profile(args.profile)
    if args.set:
        cfg = parse_ini(_overrides_to_ini(args.set), base=cfg)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "manifest", None):
        cfg = cfg.override("run", manifest=args.manifest)
    run_dir = args.out_dir or resolve_run_dir(cfg)
    return cfg.override("run", run_dir=run_dir)


def _run_dir(cfg: RunConfig) -> str:
    os.makedirs(cfg.run.run_dir, exist_ok=True)
    with open(os.path.join(cfg.run.run_dir, "config.ini"), "w") as f:
        f.write(cfg.to_ini())
    return cfg.run.run_dir


def _manifest(cfg: RunConfig) -> Manifest:
    if not cfg.run.manifest:
        raise ConfigError("no manifest given (use --manifest or [run] manifest)")
    return ingest_manifest(cfg.run.manifest, cfg.vad.enabled)


def cmd_synth_data(args, cfg: RunConfig) -> None:
    out = generate_synthetic_corpus(args.n_patients, cfg.run.seed, cfg.run.run_dir, args.train_fraction,
                                    cfg.features.sample_rate)
    print(out)


def cmd_extract_features(args, cfg: RunConfig) -> None:
    run_dir = _run_dir(cfg)
    manifest = _manifest(cfg)
    n = 0
    for rec in sorted(manifest.clips, key=lambda c: c.clip_id):
        wav = load_audio(rec, cfg)
        clip_dir = os.path.join(run_dir, "features", rec.clip_id)
        os.makedirs(clip_dir, exist_ok=True)
        for i, (start, end) in enumerate(response_spans(rec, wav, cfg)):
            formats.save_matrix(os.path.join(clip_dir, f"{i:04d}.spec"), features_for(wav.crop(start, end), cfg))
            n += 1
    log.info("wrote %d response spectrograms under %s", n, os.path.join(run_dir, "features"))


def cmd_prepare_pretrain(args, cfg: RunConfig) -> None:
    run_dir = _run_dir(cfg)
    samples, stats = prepare_pretrain_data(_manifest(cfg), cfg)
    path = os.path.join(run_dir, "pairs.bin")
    with open(path, "wb") as f:
        formats.write_pairs(f, samples)
    log.info("wrote %d training pairs to %s", stats.samples, path)


def _load_pairs(path: str) -> List[TrainingSample]:
    with open(path, "rb") as f:
        return [TrainingSample(ctx, ctr, clip, idx) for clip, idx, ctx, ctr in formats.iter_pairs(f)]


def cmd_pretrain(args, cfg: RunConfig) -> None:
    run_dir = _run_dir(cfg)
    samples = _load_pairs(args.pairs or os.path.join(run_dir, "pairs.bin"))
    path = os.path.join(run_dir, "encoder.ckpt")
    try:
        ckpt = pretrain(samples, cfg.pretrain, cfg.encoder, cfg.decoder, cfg.slice_config(), log_every=10)
    except PretrainDiverged as exc:
        save_checkpoint(exc.checkpoint, path)
        raise
    save_checkpoint(ckpt, path)
    write_loss_csv(os.path.join(run_dir, "pretrain_loss.csv"), ckpt.loss_trace)
    log.info("final loss %.5f, checkpoint %s", ckpt.final_loss, path)


def cmd_embed(args, cfg: RunConfig) -> None:
    run_dir = _run_dir(cfg)
    ckpt = None
    if cfg.pipeline.features == "depa":
        ckpt = load_checkpoint(args.checkpoint or os.path.join(run_dir, "encoder.ckpt"))
    out_dir = os.path.join(run_dir, "embeddings")
    os.makedirs(out_dir, exist_ok=True)
    for pid, seq in sorted(build_sequences(_manifest(cfg), cfg, ckpt).items()):
        formats.write_embeddings(os.path.join(out_dir, f"{pid}.emb"), list(seq.features))
    log.info("wrote embeddings under %s", out_dir)


def _sequences(cfg: RunConfig, split: str) -> List[PatientSequence]:
    emb_dir = os.path.join(cfg.run.run_dir, "embeddings")
    out = []
    for rec in sorted(_manifest(cfg).split(split), key=lambda c: c.clip_id):
        path = os.path.join(emb_dir, f"{rec.clip_id}.emb")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing embeddings for {rec.clip_id}: run the embed stage first")
        _, rows = formats.read_embeddings(path)
        out.append(PatientSequence(rec.clip_id, rows, rec.phq8_binary, rec.phq8_score))
    if not out:
        raise ValueError(f"manifest has no {split} clips")
    return out


def cmd_train_detector(args, cfg: RunConfig) -> None:
    run_dir = _run_dir(cfg)
    train = _sequences(cfg, "train")
    det = train_detector(train, cfg.detector, fit_standardizer(train), log_every=10)
    save_detector(det, os.path.join(run_dir, "detector.ckpt"))
    write_loss_csv(os.path.join(run_dir, "detector_loss.csv"), det.loss_trace)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    run_dir = cfg.run.run_dir
    det = load_detector(args.detector or os.path.join(run_dir, "detector.ckpt"))
    dev = _sequences(cfg, "dev")
    preds = [predict(det, p) for p in dev]
    write_predictions(os.path.join(run_dir, "predictions.csv"), [p.patient_id for p in dev], preds)
    creport, rreport = evaluate_predictions(dev, preds)
    with open(os.path.join(run_dir, "metrics.txt"), "w") as f:
        f.write(format_text(creport, rreport))
    with open(os.path.join(run_dir, "metrics.csv"), "w") as f:
        f.write(format_csv(creport, rreport))
    print(format_text(creport, rreport), end="")


def cmd_run_all(args, cfg: RunConfig) -> None:
    _manifest(cfg)  # fail fast on a missing or invalid manifest
    result = run_end_to_end(cfg, run_dir=cfg.run.run_dir)
    print(format_text(result.classification, result.regression), end="")


COMMANDS = {
    "extract-features": (cmd_extract_features, "compute per-response spectrograms"),
    "prepare-pretrain": (cmd_prepare_pretrain, "slice responses into context/center training pairs"),
    "pretrain": (cmd_pretrain, "train the encoder-decoder on a pair archive"),
    "embed": (cmd_embed, "embed every response with the trained encoder"),
    "train-detector": (cmd_train_detector, "fit the BLSTM detector on train-split embeddings"),
    "evaluate": (cmd_evaluate, "predict the dev split and write metric reports"),
    "synth-data": (cmd_synth_data, "write a synthetic corpus with a planted signal"),
    "run-all": (cmd_run_all, "run every stage end to end"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--profile", choices=("desk", "full"), default="desk",
                        help="built-in defaults when --config is not given")
    common.add_argument("--seed", type=int, help="seed for every stage")
    common.add_argument("--out-dir", help="run directory (overrides $DEPA_RUN_DIR and [run] run_dir)")
    common.add_argument("--manifest", help="JSONL dataset manifest")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="depa", description="Self-supervised audio embeddings for depression detection.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "synth-data":
            p.add_argument("--n-patients", type=int, default=40)
            p.add_argument("--train-fraction", type=float, default=0.7)
        elif name == "pretrain":
            p.add_argument("--pairs", help="pair archive (default: <run dir>/pairs.bin)")
        elif name == "embed":
            p.add_argument("--checkpoint", help="encoder checkpoint (default: <run dir>/encoder.ckpt)")
        elif name == "evaluate":
            p.add_argument("--detector", help="detector checkpoint (default: <run dir>/detector.ckpt)")
    return parser


def _exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, PretrainDiverged):
        return EXIT_RUNTIME
    if isinstance(cause, (ValueError, FileNotFoundError)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    fn, _ = COMMANDS[args.command]
    try:
        cfg = resolve_config(args)
        log.debug("resolved configuration:\n%s", cfg.to_ini())
        fn(args, cfg)
    except (Exception, PretrainDiverged) as exc:
        log.error("%s failed: %s", args.command, exc)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
