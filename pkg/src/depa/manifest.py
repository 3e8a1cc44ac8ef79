"""Line-delimited JSON dataset manifests.

One clip per line::

    {"clip_id": "P001", "audio": "audio/P001.wav", "split": "train",
     "segments": [{"start_seconds": 1.2, "end_seconds": 3.4, "speaker_role": "participant"}],
     "labels": {"phq8_binary": 1, "phq8_score": 14}}

``segments`` and ``labels`` are optional. Audio paths are resolved relative to
the manifest file. A segment may also carry ``frame_features``, a path to a
precomputed frame-level feature matrix for that response.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

SPLITS = ("train", "dev")
ROLES = ("participant", "interviewer")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    start_seconds: float
    end_seconds: float
    speaker_role: str = "participant"
    frame_features: Optional[str] = None


@dataclass
class ClipRecord:
    clip_id: str
    audio: str
    split: str
    segments: List[Segment] = field(default_factory=list)
    phq8_binary: Optional[int] = None
    phq8_score: Optional[float] = None
    line: int = 0

    @property
    def labeled(self) -> bool:
        return self.phq8_binary is not None

    @property
    def responses(self) -> List[Segment]:
        return [s for s in self.segments if s.speaker_role == "participant"]


@dataclass
class Manifest:
    clips: List[ClipRecord]
    path: str = ""

    def split(self, name: str) -> List[ClipRecord]:
        return [c for c in self.clips if c.split == name]

    def __len__(self):
        return len(self.clips)


def _fail(line: int, clip: str, msg: str):
    where = f"line {line}" + (f" (clip {clip})" if clip else "")
    raise ManifestError(f"{where}: {msg}")


def _parse_record(obj: dict, line: int, base_dir: str) -> ClipRecord:
    if not isinstance(obj, dict):
        _fail(line, "", "record is not a JSON object")
    clip_id = obj.get("clip_id")
    if not isinstance(clip_id, str) or not clip_id:
        _fail(line, "", "missing clip_id")
    unknown = set(obj) - {"clip_id", "audio", "split", "segments", "labels"}
    if unknown:
        _fail(line, clip_id, f"unknown field(s) {sorted(unknown)}")
    audio = obj.get("audio")
    if not isinstance(audio, str) or not audio:
        _fail(line, clip_id, "missing audio path")
    split = obj.get("split")
    if split not in SPLITS:
        _fail(line, clip_id, f"split must be one of {SPLITS}, got {split!r}")

    segments = []
    for s in obj.get("segments") or []:
        try:
            start, end = float(s["start_seconds"]), float(s["end_seconds"])
        except (KeyError, TypeError, ValueError):
            _fail(line, clip_id, f"malformed segment {s!r}")
        role = s.get("speaker_role", "participant")
        if role not in ROLES:
            _fail(line, clip_id, f"unknown speaker_role {role!r}")
        if start < 0 or end <= start:
            _fail(line, clip_id, f"segment [{start}, {end}] is empty or negative")
        ff = s.get("frame_features")
        if ff is not None:
            ff = os.path.join(base_dir, ff)
        segments.append(Segment(start, end, role, ff))
    for a, b in zip(segments, segments[1:]):
        if b.start_seconds < a.end_seconds:
            _fail(line, clip_id, f"segments overlap or are out of order at {b.start_seconds}s")

    rec = ClipRecord(clip_id, os.path.join(base_dir, audio), split, segments, line=line)
    labels = obj.get("labels")
    if labels is not None:
        if "phq8_binary" not in labels or "phq8_score" not in labels:
            _fail(line, clip_id, "labels need both phq8_binary and phq8_score")
        if labels["phq8_binary"] not in (0, 1):
            _fail(line, clip_id, f"phq8_binary must be 0 or 1, got {labels['phq8_binary']!r}")
        score = float(labels["phq8_score"])
        if not 0 <= score <= 24:
            _fail(line, clip_id, f"phq8_score {score} outside [0, 24]")
        rec.phq8_binary, rec.phq8_score = int(labels["phq8_binary"]), score
    return rec


def parse_manifest(text: str, base_dir: str = ".", vad_enabled: bool = False, path: str = "") -> Manifest:
    clips: List[ClipRecord] = []
    seen = {}
    for i, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            _fail(i, "", f"invalid JSON: {exc.msg}")
        rec = _parse_record(obj, i, base_dir)
        if rec.clip_id in seen:
            _fail(i, rec.clip_id, f"duplicate clip_id (first on line {seen[rec.clip_id]})")
        seen[rec.clip_id] = i
        if not rec.responses and not vad_enabled:
            _fail(i, rec.clip_id, "no participant segments and VAD disabled; cannot form responses")
        clips.append(rec)
    if not clips:
        raise ManifestError("manifest has no records")
    for split in SPLITS:
        members = [c for c in clips if c.split == split]
        if any(c.labeled for c in members):
            for c in members:
                if not c.labeled:
                    _fail(c.line, c.clip_id, f"missing labels on labeled split {split!r}")
    return Manifest(clips, path)


def ingest_manifest(path, vad_enabled: bool = False) -> Manifest:
    with open(path) as f:
        text = f.read()
    return parse_manifest(text, os.path.dirname(os.path.abspath(path)), vad_enabled, str(path))


def record_to_json(rec: ClipRecord, base_dir: str = "") -> str:
    obj = {
        "clip_id": rec.clip_id,
        "audio": os.path.relpath(rec.audio, base_dir) if base_dir else rec.audio,
        "split": rec.split,
    }
    if rec.segments:
        obj["segments"] = []
        for s in rec.segments:
            d = {"start_seconds": round(s.start_seconds, 6), "end_seconds": round(s.end_seconds, 6),
                 "speaker_role": s.speaker_role}
            if s.frame_features:
                d["frame_features"] = os.path.relpath(s.frame_features, base_dir) if base_dir else s.frame_features
            obj["segments"].append(d)
    if rec.labeled:
        obj["labels"] = {"phq8_binary": rec.phq8_binary, "phq8_score": rec.phq8_score}
    return json.dumps(obj)


def write_manifest(path, clips: List[ClipRecord]) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w") as f:
        for c in clips:
            f.write(record_to_json(c, base) + "\n")
