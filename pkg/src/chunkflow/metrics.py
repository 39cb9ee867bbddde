"""Drift metrics: identity similarity, Frechet proxy, sync correlation, drift curves."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ChunkflowError
from .toy_world import ClipOracle, face_mask

FPS = 25.0


class SyncResult(NamedTuple):
    value: float
    flag: str  # "" or "degenerate"


def identity_similarity(window, identity, mask, period: int | None = None) -> float:
    """Cosine similarity, outside the mask, between the time-averaged window and the identity."""
    window = np.asarray(window, dtype=np.float64)
    if period is not None and window.shape[0] % period:
        raise ChunkflowError("window-period", f"window of {window.shape[0]} frames is not a multiple of {period}")
    keep = ~np.asarray(mask, dtype=bool)
    avg = window.mean(axis=0)[keep]
    ref = np.asarray(identity, dtype=np.float64)[keep]
    denom = np.linalg.norm(avg) * np.linalg.norm(ref)
    if denom == 0:
        return 0.0
    return float(np.clip(avg @ ref / denom, -1.0, 1.0))


def pooled_features(frames, pool: int = 4) -> np.ndarray:
    """Per-frame average pooling: [n, H, W] -> [n, (H/pool)*(W/pool)]."""
    frames = np.asarray(frames, dtype=np.float64)
    n, H, W = frames.shape
    return frames.reshape(n, H // pool, pool, W // pool, pool).mean(axis=(2, 4)).reshape(n, -1)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu1, cov1, mu2, cov2, floor: float = 1e-10) -> float:
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    root1 = _sqrtm_psd(cov1)
    inner = root1 @ cov2 @ root1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(np.where(vals > floor, vals, 0.0)).sum()
    value = float(((mu1 - mu2) ** 2).sum() + np.trace(cov1) + np.trace(cov2) - 2 * tr_cross)
    return max(value, 0.0)


def frechet_proxy(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets [n, d] and [m, d]."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    d = a.shape[1]
    if a.shape[0] <= d or b.shape[0] <= d:
        raise ChunkflowError("frechet-samples", f"need more samples than dimensions ({d})")
    fa = frechet_from_moments(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))
    fb = frechet_from_moments(b.mean(0), np.cov(b, rowvar=False), a.mean(0), np.cov(a, rowvar=False))
    return 0.5 * (fa + fb)


def masked_mean_series(frames, mask) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    return frames[:, np.asarray(mask, dtype=bool)].mean(axis=1)


def pearson(x, y) -> SyncResult:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    y = np.asarray(y, dtype=np.float64) - np.mean(y)
    denom = np.sqrt((x @ x) * (y @ y))
    if denom < 1e-12:
        return SyncResult(0.0, "degenerate")
    return SyncResult(float(np.clip(x @ y / denom, -1.0, 1.0)), "")


def sync_correlation(frames, audio, mask) -> SyncResult:
    """Pearson correlation of the masked-region mean intensity with audio column 0."""
    return pearson(masked_mean_series(frames, mask), np.asarray(audio)[:, 0])


def sync_offset(frames, audio, mask, max_lag: int | None = None) -> int:
    """|lag| (frames) at which the audio best lines up with the mouth signal; ties go to the smaller lag."""
    series = masked_mean_series(frames, mask)
    a = np.asarray(audio, dtype=np.float64)[:, 0]
    T = len(series)
    max_lag = max_lag if max_lag is not None else T // 2
    best, best_lag = -np.inf, 0
    for lag in sorted(range(-max_lag, max_lag + 1), key=abs):
        r = pearson(series, np.roll(a, -lag)).value
        if r > best + 1e-9:
            best, best_lag = r, lag
    return abs(best_lag)


@dataclass
class MetricsReport:
    horizon_points: list[int]
    id_sim: list[float]
    frechet: list[float]
    sync_corr: list[float]
    fps: float | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.horizon_points)
        if not (len(self.id_sim) == len(self.frechet) == len(self.sync_corr) == n):
            raise ChunkflowError("report-shape", "metric lists must have equal length")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path, T: int) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chunk_index", "seconds_equiv", "id_sim", "frechet", "sync_corr"])
            for k, s, f, c in zip(self.horizon_points, self.id_sim, self.frechet, self.sync_corr):
                writer.writerow([k, repr(k * T / FPS), repr(s), repr(f), repr(c)])


def window_bounds(chunk_index: int, T: int, window_chunks: int, period: int) -> tuple[int, int]:
    """Frame range ending at the end of ``chunk_index`` (1-based), trimmed to whole motion periods."""
    stop = chunk_index * T
    length = min(window_chunks, chunk_index) * T
    length -= length % period
    if length == 0:
        raise ChunkflowError("window-period", "window shorter than one motion period")
    return stop - length, stop


def drift_curve(frames, oracle: ClipOracle, T: int, stride: int = 1, window_chunks: int = 2,
                fps: float | None = None, config: dict | None = None) -> MetricsReport:
    """Evaluate the three metrics at chunk indices stride, 2*stride, ..., K.

    ``frames`` are the generated frames of a rollout driven by ``oracle``'s audio
    and identity image; ground truth windows are regenerated from the oracle.
    """
    frames = np.asarray(getattr(frames, "frames", frames))
    K = frames.shape[0] // T
    gt = oracle.clip(K * T)
    identity = oracle.identity()
    world = oracle.config
    mask = face_mask(world)
    period = world.period
    points = list(range(stride, K + 1, stride))
    if points and points[-1] != K:
        points.append(K)
    id_sim, frechet, sync = [], [], []
    for k in points:
        lo, hi = window_bounds(k, T, window_chunks, period)
        window = frames[lo:hi]
        id_sim.append(identity_similarity(window, identity, mask, period))
        frechet.append(frechet_proxy(pooled_features(window), pooled_features(gt.frames[lo:hi])))
        sync.append(sync_correlation(window, gt.audio[lo:hi], mask).value)
    return MetricsReport(points, id_sim, frechet, sync, fps, dict(config or {}))
