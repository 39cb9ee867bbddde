"""Synthetic talking-sequence world.

A clip is a static identity pattern plus a sinusoidal deformation confined to a
rectangular "face" mask, driven by a hidden phase. The audio features are exact
trigonometric functions of that phase, so lip sync and identity preservation
both have closed-form oracles.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ChunkflowError

CORRUPTION_MODES = ("occlusion", "desync", "low_quality")


@dataclass(frozen=True)
class WorldConfig:
    height: int = 16
    width: int = 16
    mask_rect: tuple[int, int, int, int] = (10, 14, 5, 11)  # row0, row1, col0, col1 (half-open)
    motion_amp: float = 0.5
    base_rate: float = 2 * math.pi / 16
    phase_noise: float = 0.02
    pixel_noise: float = 0.01
    audio_dim: int = 4
    seed: int = 0
    random_ref_frame: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mask_rect", tuple(int(v) for v in self.mask_rect))
        self.validate()

    def validate(self) -> None:
        r0, r1, c0, c1 = self.mask_rect
        problems = []
        if not (0 <= r0 < r1 <= self.height and 0 <= c0 < c1 <= self.width):
            problems.append("mask_rect must lie inside the frame")
        if self.height % 2 or self.width % 2:
            problems.append("height and width must be even")
        if self.motion_amp <= 0 or self.base_rate <= 0:
            problems.append("motion_amp and base_rate must be positive")
        if self.pixel_noise < 0 or self.phase_noise < 0:
            problems.append("noise levels must be non-negative")
        if self.audio_dim < 2:
            problems.append("audio_dim must be >= 2")
        if problems:
            raise ChunkflowError("world-config", "; ".join(problems))

    @property
    def period(self) -> int:
        """Motion period in frames, rounded to the nearest integer."""
        return max(1, int(round(2 * math.pi / self.base_rate)))


def face_mask(config: WorldConfig) -> np.ndarray:
    r0, r1, c0, c1 = config.mask_rect
    mask = np.zeros((config.height, config.width), dtype=bool)
    mask[r0:r1, c0:c1] = True
    return mask


class Clip:
    """Ground-truth sequence. The hidden phase is only reachable via :func:`oracle_phase`."""

    def __init__(self, frames, audio, identity_image, phase, clip_id: str, meta: dict | None = None):
        frames = np.asarray(frames, dtype=np.float32)
        audio = np.asarray(audio, dtype=np.float32)
        if frames.ndim != 3 or frames.shape[0] < 1:
            raise ChunkflowError("clip-shape", f"frames must be [T,H,W] with T>=1, got {frames.shape}")
        if audio.ndim != 2 or audio.shape[0] != frames.shape[0]:
            raise ChunkflowError("clip-shape", "audio length must equal frame length")
        self.frames = frames
        self.audio = audio
        self.identity_image = np.asarray(identity_image, dtype=np.float32)
        self._phase = None if phase is None else np.asarray(phase, dtype=np.float32)
        self.clip_id = clip_id
        self.meta = dict(meta or {})

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def phase(self):
        raise ChunkflowError("oracle-only", "the phase is an oracle field; use toy_world.oracle_phase")

    def replace(self, **changes) -> "Clip":
        kw = dict(
            frames=self.frames,
            audio=self.audio,
            identity_image=self.identity_image,
            phase=self._phase,
            clip_id=self.clip_id,
            meta=self.meta,
        )
        kw.update(changes)
        return Clip(**kw)


def oracle_phase(clip: Clip) -> np.ndarray:
    if clip._phase is None:
        raise ChunkflowError("oracle-only", f"clip {clip.clip_id} carries no phase")
    return clip._phase


def generate_identity(config: WorldConfig, rng_seed: int, zero_coeffs: bool = False) -> np.ndarray:
    """Smooth random pattern in [-1, 1] from the lowest 3x3 cosine modes."""
    rng = np.random.default_rng([int(rng_seed), 0x1D])
    coeffs = np.zeros((3, 3)) if zero_coeffs else rng.standard_normal((3, 3))
    y = (np.arange(config.height) + 0.5) / config.height
    x = (np.arange(config.width) + 0.5) / config.width
    basis_y = np.cos(np.pi * np.arange(3)[:, None] * y[None, :])  # [3, H]
    basis_x = np.cos(np.pi * np.arange(3)[:, None] * x[None, :])  # [3, W]
    field_ = np.einsum("ij,iy,jx->yx", coeffs, basis_y, basis_x)
    peak = np.abs(field_).max()
    if peak > 0:
        field_ = field_ / peak
    return field_.astype(np.float32)


def audio_features(phase: np.ndarray, audio_dim: int) -> np.ndarray:
    phase = np.asarray(phase, dtype=np.float64)
    feats = np.zeros((phase.shape[0], audio_dim))
    cols = [np.sin(phase), np.cos(phase), np.sin(2 * phase), np.cos(2 * phase)]
    for i, col in enumerate(cols[:audio_dim]):
        feats[:, i] = col
    return feats


def generate_clip(
    config: WorldConfig,
    identity: np.ndarray,
    T: int,
    rng_seed: int,
    clip_id: str | None = None,
    phase0: float | None = None,
) -> Clip:
    if T < 1:
        raise ChunkflowError("clip-shape", "T must be >= 1")
    rng = np.random.default_rng([int(rng_seed), 0xC1])
    start = rng.uniform(0.0, 2 * np.pi) if phase0 is None else float(phase0)
    steps = config.base_rate + config.phase_noise * rng.standard_normal(T - 1)
    phase = start + np.concatenate([[0.0], np.cumsum(steps)])
    mask = face_mask(config)
    motion = config.motion_amp * np.sin(phase)[:, None, None] * mask[None]
    frames = identity[None].astype(np.float64) + motion
    if config.pixel_noise > 0:
        frames = frames + config.pixel_noise * rng.standard_normal(frames.shape)
    ref_index = int(rng.integers(T)) if config.random_ref_frame else 0
    return Clip(
        frames=frames,
        audio=audio_features(phase, config.audio_dim),
        identity_image=frames[ref_index],
        phase=phase,
        clip_id=clip_id or f"clip-{rng_seed}",
        meta={"seed": int(rng_seed), "T": int(T), "corruption": "none", "ref_index": ref_index},
    )


def corrupt_clip(
    clip: Clip,
    mode: str | None,
    rng_seed: int,
    config: WorldConfig,
    shift: int | None = None,
) -> tuple[Clip, str]:
    """Damage a clip in one of the ways the quality filters are meant to catch.

    ``mode=None`` (or ``"none"``) returns the clip untouched. ``desync`` picks
    the smallest circular shift >= T/4 that lands half a motion period off,
    unless ``shift`` is given.
    """
    if mode in (None, "none"):
        return clip, "none"
    if mode not in CORRUPTION_MODES:
        raise ChunkflowError("corruption-mode", f"unknown mode {mode!r}")
    rng = np.random.default_rng([int(rng_seed), 0xBAD])
    T = clip.T
    meta = {**clip.meta, "corruption": mode}
    if mode == "occlusion":
        n_occ = math.ceil(0.4 * T)
        idx = rng.choice(T, size=n_occ, replace=False)
        frames = clip.frames.copy()
        r0, r1, c0, c1 = config.mask_rect
        frames[np.ix_(idx, np.arange(r0, r1), np.arange(c0, c1))] = 0.0
        return clip.replace(frames=frames, meta=meta), mode
    if mode == "desync":
        if shift is None:
            period = config.period
            shift = math.ceil(T / 4)
            while shift % period != period // 2:
                shift += 1
        meta["shift"] = int(shift)
        return clip.replace(audio=np.roll(clip.audio, int(shift), axis=0), meta=meta), mode
    sigma = 10 * config.pixel_noise + 0.5
    frames = clip.frames + sigma * rng.standard_normal(clip.frames.shape).astype(np.float32)
    return clip.replace(frames=frames, meta=meta), mode


@dataclass(frozen=True)
class ClipOracle:
    """Handle that regenerates ground truth for one identity on demand."""

    config: WorldConfig
    identity_seed: int
    clip_seed: int

    def identity(self) -> np.ndarray:
        return generate_identity(self.config, self.identity_seed)

    def clip(self, T: int) -> Clip:
        return generate_clip(self.config, self.identity(), T, self.clip_seed)


# -- serialization ---------------------------------------------------------


def _write_f32(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(path: Path, shape) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ChunkflowError("clip-shape", f"{path.name}: expected {expected} floats, found {data.size}")
    return data.reshape(shape).astype(np.float32)


def save_clip(clip: Clip, directory, config: WorldConfig | None = None, include_phase: bool = True) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {
        "frames": list(clip.frames.shape),
        "audio": list(clip.audio.shape),
        "identity_image": list(clip.identity_image.shape),
    }
    _write_f32(directory / "frames.f32", clip.frames)
    _write_f32(directory / "audio.f32", clip.audio)
    _write_f32(directory / "identity.f32", clip.identity_image)
    if include_phase and clip._phase is not None:
        _write_f32(directory / "phase.f32", clip._phase)
        shapes["phase"] = list(clip._phase.shape)
    meta = {
        "clip_id": clip.clip_id,
        "T": clip.T,
        "seed": clip.meta.get("seed"),
        "corruption": clip.meta.get("corruption", "none"),
        "shapes": shapes,
        "dtype": "float32-le",
        "config": _config_dict(config) if config is not None else None,
        "extra": {k: v for k, v in clip.meta.items() if k not in ("seed", "corruption")},
    }
    (directory / "clip.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_clip(directory) -> Clip:
    directory = Path(directory)
    meta = json.loads((directory / "clip.meta.json").read_text())
    shapes = meta["shapes"]
    phase = _read_f32(directory / "phase.f32", shapes["phase"]) if "phase" in shapes else None
    return Clip(
        frames=_read_f32(directory / "frames.f32", shapes["frames"]),
        audio=_read_f32(directory / "audio.f32", shapes["audio"]),
        identity_image=_read_f32(directory / "identity.f32", shapes["identity_image"]),
        phase=phase,
        clip_id=meta["clip_id"],
        meta={"seed": meta.get("seed"), "corruption": meta.get("corruption", "none"), **meta.get("extra", {})},
    )


def _config_dict(config: WorldConfig) -> dict:
    d = asdict(config)
    d["mask_rect"] = list(config.mask_rect)
    return d


def config_from_dict(d: dict) -> WorldConfig:
    d = dict(d)
    if "mask_rect" in d:
        d["mask_rect"] = tuple(d["mask_rect"])
    return WorldConfig(**d)
