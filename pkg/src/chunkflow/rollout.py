"""Chunk-wise autoregressive inference with decode-then-re-encode continuity."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .codec import DEFAULT_CODEC, CodecConfig, check_frames, decode
from .conditioning import (
    ConditioningBundle,
    ContinuityRef,
    build_audio_condition,
    build_identity,
    continuity_from_generated,
    continuity_from_reference,
)
from .errors import ChunkflowError
from .velocity import VelocityNet, euler_sample


@dataclass(frozen=True)
class RolloutConfig:
    K: int = 40
    T: int = 17
    N: int = 4
    tau: int = 5
    identity_scheme: str = "TRE"
    seed: int = 0


@dataclass
class RolloutResult:
    frames: np.ndarray  # [K*T, H, W]
    per_chunk_latents: list[torch.Tensor]
    timing: list[float]  # ms per chunk
    provenance: list[str]
    noises: list[torch.Tensor] = field(default_factory=list)
    continuity: list[ContinuityRef] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.per_chunk_latents)


def chunk_noise(seed: int, k: int, shape) -> torch.Tensor:
    ss = np.random.SeedSequence([int(seed), int(k), 0x2011])
    gen = torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))
    return torch.randn(shape, generator=gen)


ChunkFn = Callable[[int, torch.Tensor, ConditioningBundle], torch.Tensor]


@torch.no_grad()
def _rollout(sample_chunk: ChunkFn, identity_image, audio, config: RolloutConfig,
             codec: CodecConfig = DEFAULT_CODEC, record: bool = False) -> RolloutResult:
    T, K = config.T, config.K
    check_frames(T, codec)
    audio = torch.as_tensor(np.asarray(audio, dtype=np.float32))
    if audio.shape[0] != K * T:
        raise ChunkflowError("audio-shape", f"audio has {audio.shape[0]} rows, expected K*T={K * T}")
    identity_image = torch.as_tensor(np.asarray(identity_image, dtype=np.float32))
    c_I = build_identity(identity_image, T, config.identity_scheme, codec)
    kappa = continuity_from_reference(identity_image, config.tau, codec)
    frames, latents, timing, prov, noises, refs = [], [], [], [], [], []
    for k in range(K):
        t0 = time.perf_counter()
        try:
            conds = ConditioningBundle(build_audio_condition(audio[k * T : (k + 1) * T], codec), c_I, kappa)
            z = chunk_noise(config.seed, k, c_I.latents.shape)
            x = sample_chunk(k, z, conds)
            if x.shape != z.shape:
                raise ChunkflowError("chunk-shape", f"sampler returned {tuple(x.shape)}, expected {tuple(z.shape)}")
            frames.append(decode(x, T, codec))
            prov.append(kappa.provenance)
            if record:
                noises.append(z)
                refs.append(kappa)
            kappa = continuity_from_generated(x, T, config.tau, codec)
        except ChunkflowError as err:
            raise ChunkflowError(err.code, f"chunk {k}: {err}") from err
        latents.append(x)
        timing.append((time.perf_counter() - t0) * 1e3)
    return RolloutResult(torch.cat(frames).numpy(), latents, timing, prov, noises, refs)


def sampler_for(params: VelocityNet, n_steps: int) -> ChunkFn:
    return lambda k, z, conds: euler_sample(params, z, conds, n_steps)


def rollout(student: VelocityNet, identity_image, audio, config: RolloutConfig = RolloutConfig(),
            codec: CodecConfig = DEFAULT_CODEC, record: bool = False) -> RolloutResult:
    """Generate ``K`` chunks from the identity image and an audio stream of ``K*T`` rows.

    Takes no ground-truth frames: chunk 1 is conditioned on the replicated
    identity image, every later chunk on the re-encoded tail of its predecessor.
    """
    if student.role != "student":
        raise ChunkflowError("model-role", f"rollout needs a student, got {student.role}")
    return _rollout(sampler_for(student, config.N), identity_image, audio, config, codec, record)


def rollout_with(sample_chunk: ChunkFn, identity_image, audio, config: RolloutConfig = RolloutConfig(),
                 codec: CodecConfig = DEFAULT_CODEC, record: bool = False) -> RolloutResult:
    """Same loop driven by an arbitrary chunk sampler (debug stubs, teacher sampling)."""
    return _rollout(sample_chunk, identity_image, audio, config, codec, record)


def measure_throughput(params: VelocityNet, identity_image, audio, config: RolloutConfig, n_steps: int,
                       warmup_chunks: int = 1, codec: CodecConfig = DEFAULT_CODEC) -> float:
    """Frames per second over ``config.K`` chunks (>= 5), after ``warmup_chunks`` untimed chunks."""
    if config.K < 5:
        raise ChunkflowError("throughput", "measure over at least 5 chunks")
    sampler = sampler_for(params, n_steps)
    warm = RolloutConfig(K=warmup_chunks, T=config.T, N=n_steps, tau=config.tau,
                         identity_scheme=config.identity_scheme, seed=config.seed)
    _rollout(sampler, identity_image, np.asarray(audio)[: warmup_chunks * config.T], warm, codec)
    t0 = time.perf_counter()
    _rollout(sampler, identity_image, audio, config, codec)
    elapsed = time.perf_counter() - t0
    return config.K * config.T / elapsed


def save_rollout(result: RolloutResult, directory, config: RolloutConfig, extra: dict | None = None) -> Path:
    """Write in the clip directory format (no phase file)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "frames.f32").write_bytes(np.ascontiguousarray(result.frames, dtype="<f4").tobytes())
    meta = {
        "shapes": {"frames": list(result.frames.shape)},
        "dtype": "float32-le",
        "K": config.K,
        "T": config.T,
        "N": config.N,
        "tau": config.tau,
        "seed": config.seed,
        "identity_scheme": config.identity_scheme,
        "provenance": result.provenance,
        **(extra or {}),
    }
    (directory / "rollout.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_rollout_frames(directory) -> np.ndarray:
    directory = Path(directory)
    meta = json.loads((directory / "rollout.meta.json").read_text())
    data = np.frombuffer((directory / "frames.f32").read_bytes(), dtype="<f4")
    return data.reshape(meta["shapes"]["frames"]).astype(np.float32)
