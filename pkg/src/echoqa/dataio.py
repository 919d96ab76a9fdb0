"""PGM frames and JSON-lines manifests.

Manifest rows carry a fixed key order and floats rounded to 6 decimals, so
write -> read -> write reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ATTRIBUTES

BANDS = ("poor", "average", "good")


def write_pgm(path, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    if frame.dtype != np.uint8 or frame.ndim != 2:
        raise ValueError("PGM frames must be 2-d uint8")
    h, w = frame.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(frame).tobytes())


_TOKEN = re.compile(rb"(?:\s+|#[^\n]*\n)*([^\s#]+)")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise ValueError(f"{path}: malformed PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1  # single whitespace byte after maxval
    raw = data[pos:pos + w * h]
    if len(raw) != w * h:
        raise ValueError(f"{path}: truncated PGM data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def quality_band(raw_scores) -> str:
    top = max(raw_scores)
    if top <= 4.5:
        return "poor"
    if top <= 6.5:
        return "average"
    return "good"


@dataclass
class ManifestRow:
    clip_id: str
    view: str
    frames: list
    raw_scores: list
    normalized_scores: list
    band: str

    @classmethod
    def from_raw(cls, clip_id, view, frames, raw_scores):
        raw = [int(r) for r in raw_scores]
        if len(raw) != len(ATTRIBUTES) or not all(0 <= r <= 9 for r in raw):
            raise ValueError(f"raw scores must be four integers in 0..9, got {raw_scores}")
        return cls(clip_id, view, list(frames), raw, [r / 9 for r in raw], quality_band(raw))

    def to_json(self) -> str:
        record = {
            "clip_id": self.clip_id,
            "view": self.view,
            "frames": list(self.frames),
            "raw_scores": [int(r) for r in self.raw_scores],
            "normalized_scores": [round(float(v), 6) for v in self.normalized_scores],
            "band": self.band,
        }
        return json.dumps(record, separators=(", ", ": "))

    @classmethod
    def from_json(cls, line: str) -> "ManifestRow":
        d = json.loads(line)
        row = cls.from_raw(d["clip_id"], d["view"], d["frames"], d["raw_scores"])
        # the file stores rounded values; keep the exact ones derived from raw
        stored = [round(v, 6) for v in row.normalized_scores]
        if d["normalized_scores"] != stored or d["band"] != row.band:
            raise ValueError(f"inconsistent manifest row for {d['clip_id']}")
        return row

    @property
    def targets(self):
        return np.asarray(self.raw_scores, dtype=np.float64) / 9


def write_manifest(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(row.to_json() + "\n")


def read_manifest(path) -> list[ManifestRow]:
    with open(path, encoding="utf-8") as f:
        return [ManifestRow.from_json(line) for line in f if line.strip()]


def load_clips(rows, root, frames=None, size=None):
    """Decode every row's frames into float clips [N, T, 1, H, W] in [0, 1]
    and targets [N, 4]."""
    root = Path(root)
    clips = []
    for row in rows:
        if frames is not None and len(row.frames) != frames:
            raise ValueError(f"{row.clip_id}: expected {frames} frames, found {len(row.frames)}")
        stack = np.stack([read_pgm(root / p) for p in row.frames])
        if size is not None and stack.shape[1:] != tuple(size):
            raise ValueError(f"{row.clip_id}: frame size {stack.shape[1:]} != {tuple(size)}")
        clips.append(stack)
    if not clips:
        raise ValueError("manifest is empty")
    arr = np.stack(clips).astype(np.float32) / np.float32(255)
    targets = np.stack([row.targets for row in rows])
    return arr[:, :, None], targets


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r, separators=(", ", ": ")) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
