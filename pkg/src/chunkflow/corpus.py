"""Dataset-construction cascade over clip metadata: hashing, dedup, quality filters, training tuples."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ChunkflowError
from .metrics import masked_mean_series, pearson, sync_offset
from .toy_world import (
    CORRUPTION_MODES,
    Clip,
    WorldConfig,
    config_from_dict,
    corrupt_clip,
    face_mask,
    generate_clip,
    generate_identity,
    load_clip,
    save_clip,
)

V_MIN = 1e-8  # mask-region variance floor of the toy face detector
QUALITY_SCALE = 0.1
TARGET_FPS = 25.0
PREDICATES = ("face_visibility", "quality", "sync_c", "sync_d", "hand_occlusion", "keypoint_missing")


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    source: str
    hash: int
    fps: float
    T: int
    face_visibility: float
    quality: float
    sync_c: float
    sync_d: float
    hand_occlusion_flag: bool = False
    keypoint_missing_flag: bool = False
    path: str = ""

    def __post_init__(self):
        if not 0.0 <= self.face_visibility <= 1.0:
            raise ChunkflowError("record-invalid", f"{self.clip_id}: face_visibility outside [0, 1]")
        if self.T < 1:
            raise ChunkflowError("record-invalid", f"{self.clip_id}: T must be >= 1")


@dataclass(frozen=True)
class Thresholds:
    """Retain a record iff visibility >= face, quality >= quality, sync_c >= sync_c and sync_d <= sync_d."""

    face: float = 0.8
    quality: float = 0.5
    sync_c: float = 0.5
    sync_d: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.face <= 1.0:
            raise ChunkflowError("thresholds", "face visibility threshold must lie in [0, 1]")


@dataclass(frozen=True)
class TrainingTuple:
    clip_id: str
    k: int
    ref: str
    chunk: str
    audio: str
    mask: str


# -- per-clip measurements ----------------------------------------------------


def compute_hash(frames) -> int:
    """64-bit difference hash of the 8x8 average-pooled temporal mean."""
    mean = np.asarray(frames, dtype=np.float64).mean(axis=0)
    H, W = mean.shape
    if H % 8 or W % 8:
        raise ChunkflowError("hash-shape", f"frame size {H}x{W} is not divisible into an 8x8 grid")
    cells = mean.reshape(8, H // 8, 8, W // 8).mean(axis=(1, 3)).ravel()
    bits = cells > np.median(cells)
    return int(sum(1 << i for i, b in enumerate(bits) if b))


def dedup(records: list) -> list:
    """Keep the first occurrence of every hash, preserving order."""
    seen = set()
    kept = []
    for rec in records:
        if rec.hash not in seen:
            seen.add(rec.hash)
            kept.append(rec)
    return kept


def frame_visible(frames, mask, v_min: float = V_MIN) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    return frames[:, np.asarray(mask, dtype=bool)].var(axis=1) > v_min


def compute_visibility(frames, mask, v_min: float = V_MIN) -> float:
    return float(frame_visible(frames, mask, v_min).mean())


def estimate_noise(frames, mask) -> float:
    """Pixel-noise std estimated from frame-to-frame differences outside the mask."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 2:
        return 0.0
    outside = frames[:, ~np.asarray(mask, dtype=bool)]
    return float(np.diff(outside, axis=0).std() / math.sqrt(2))


def compute_quality(frames, mask, scale: float = QUALITY_SCALE) -> float:
    return float(math.exp(-estimate_noise(frames, mask) / scale))


def compute_sync(frames, audio, mask, max_lag: int | None = None) -> tuple[float, float]:
    """(confidence, offset): lag-0 correlation and best-lag distance in frames."""
    conf = pearson(masked_mean_series(frames, mask), np.asarray(audio)[:, 0]).value
    return conf, float(sync_offset(frames, audio, mask, max_lag))


def record_from_clip(clip: Clip, world: WorldConfig, path: str = "", source: str = "synthetic",
                     fps: float = TARGET_FPS) -> ClipRecord:
    mask = face_mask(world)
    sync_c, sync_d = compute_sync(clip.frames, clip.audio, mask, max_lag=world.period // 2)
    return ClipRecord(
        clip_id=clip.clip_id,
        source=source,
        hash=compute_hash(clip.frames),
        fps=float(fps),
        T=clip.T,
        face_visibility=compute_visibility(clip.frames, mask),
        quality=compute_quality(clip.frames, mask),
        sync_c=sync_c,
        sync_d=sync_d,
        path=str(path),
    )


def standardize(record: ClipRecord, fps: float = TARGET_FPS) -> ClipRecord:
    """Metadata-only normalisation to the target frame rate; pixels are never resampled."""
    if record.fps <= 0:
        raise ChunkflowError("record-invalid", f"{record.clip_id}: fps must be positive")
    return replace(record, fps=float(fps))


# -- filtering ------------------------------------------------------------------


def failed_predicates(rec: ClipRecord, gamma: Thresholds) -> list[str]:
    checks = {
        "face_visibility": rec.face_visibility >= gamma.face,
        "quality": rec.quality >= gamma.quality,
        "sync_c": rec.sync_c >= gamma.sync_c,
        "sync_d": rec.sync_d <= gamma.sync_d,
        "hand_occlusion": not rec.hand_occlusion_flag,
        "keypoint_missing": not rec.keypoint_missing_flag,
    }
    return [name for name in PREDICATES if not checks[name]]


def filter_records(records: list, gamma: Thresholds = Thresholds()) -> tuple[list, dict]:
    """Apply the conjunction of quality predicates. Returns (retained, report)."""
    retained = []
    rejections = {name: 0 for name in PREDICATES}
    for rec in records:
        failed = failed_predicates(rec, gamma)
        for name in failed:
            rejections[name] += 1
        if not failed:
            retained.append(rec)
    report = {
        "input": len(records),
        "retained": len(retained),
        "rejected": len(records) - len(retained),
        "rejections_by_predicate": rejections,
        "thresholds": asdict(gamma),
    }
    return retained, report


# -- training tuples ------------------------------------------------------------

_LOCATOR = re.compile(r"^(?P<path>.*)::(?P<field>frames|audio|identity|mask)(\[(?P<lo>\d+):(?P<hi>\d+)\])?$")


def build_tuples(records: list, T: int) -> list[TrainingTuple]:
    """Non-overlapping T-frame chunks per clip; the clip's first frame is the reference."""
    tuples = []
    for rec in records:
        for k in range(rec.T // T):
            lo, hi = k * T, (k + 1) * T
            tuples.append(TrainingTuple(
                clip_id=rec.clip_id,
                k=k,
                ref=f"{rec.path}::identity",
                chunk=f"{rec.path}::frames[{lo}:{hi}]",
                audio=f"{rec.path}::audio[{lo}:{hi}]",
                mask=f"{rec.path}::mask",
            ))
    return tuples


def resolve(locator: str) -> np.ndarray:
    m = _LOCATOR.match(locator)
    if m is None:
        raise ChunkflowError("locator", f"malformed locator {locator!r}")
    directory = Path(m["path"])
    if m["field"] == "mask":
        meta = json.loads((directory / "clip.meta.json").read_text())
        if not meta.get("config"):
            raise ChunkflowError("locator", f"{directory} has no world config for its mask")
        return face_mask(config_from_dict(meta["config"]))
    clip = load_clip(directory)
    if m["field"] == "identity":
        return clip.identity_image
    arr = clip.frames if m["field"] == "frames" else clip.audio
    lo, hi = int(m["lo"]), int(m["hi"])
    if hi > arr.shape[0]:
        raise ChunkflowError("locator", f"{locator}: range beyond {arr.shape[0]} rows")
    return arr[lo:hi]


# -- manifests and synthetic corpora ----------------------------------------------


def write_manifest(records: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def read_manifest(path) -> list[ClipRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ClipRecord(**json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class CorpusSpec:
    n_clean: int = 50
    n_corrupt: int = 50
    frames: int = 68
    modes: tuple[str, ...] = field(default=CORRUPTION_MODES)


def synthetic_corpus(world: WorldConfig, spec: CorpusSpec, seed: int, directory=None) -> tuple[list, dict]:
    """Clean clips followed by corrupted ones (modes in rotation).

    Returns the records and a map clip_id -> corruption label. When
    ``directory`` is given every clip is written there and records carry its path.
    """
    records, labels = [], {}
    total = spec.n_clean + spec.n_corrupt
    for i in range(total):
        ss = np.random.SeedSequence([int(seed), i, 0xC0])
        id_seed, clip_seed, corrupt_seed = (int(s) for s in ss.generate_state(3) >> 1)
        clip = generate_clip(world, generate_identity(world, id_seed), spec.frames, clip_seed,
                             clip_id=f"c{i:05d}")
        mode = None if i < spec.n_clean else spec.modes[(i - spec.n_clean) % len(spec.modes)]
        clip, label = corrupt_clip(clip, mode, corrupt_seed, world)
        path = ""
        if directory is not None:
            path = str(save_clip(clip, Path(directory) / clip.clip_id, world))
        records.append(record_from_clip(clip, world, path))
        labels[clip.clip_id] = label
    return records, labels
