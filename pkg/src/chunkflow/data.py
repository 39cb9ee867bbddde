"""Seeded clip streams and per-chunk training batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import DEFAULT_CODEC, CodecConfig, encode
from .conditioning import (
    ConditioningBundle,
    ContinuityRef,
    IdentityCondition,
    build_audio_condition,
    build_identity,
    continuity_from_gt,
    continuity_from_reference,
)
from .toy_world import Clip, WorldConfig, face_mask, generate_clip, generate_identity


@dataclass(frozen=True)
class ClipSource:
    """Deterministic stream: clip ``i`` gets its own identity, both seeded from (seed, i)."""

    world: WorldConfig
    frames_per_clip: int
    seed: int = 0

    def seeds(self, index: int) -> tuple[int, int]:
        ss = np.random.SeedSequence([int(self.seed), int(index), 0x5EED])
        a, b = ss.generate_state(2)
        return int(a), int(b)

    def clip(self, index: int) -> Clip:
        id_seed, clip_seed = self.seeds(index)
        identity = generate_identity(self.world, id_seed)
        return generate_clip(self.world, identity, self.frames_per_clip, clip_seed, clip_id=f"s{self.seed}-c{index}")

    def batch(self, start: int, size: int) -> list[Clip]:
        return [self.clip(start + i) for i in range(size)]


@dataclass
class ChunkBatch:
    """K chunks of a batch of clips; every list is indexed by chunk number."""

    frames: list[torch.Tensor]  # [B, T, H, W]
    latents: list[torch.Tensor]  # [B, L, h, w, C]
    conds_gt: list[ConditioningBundle]  # continuity: ref for chunk 0, gt afterwards
    identity: IdentityCondition
    identity_image: torch.Tensor  # [B, H, W]
    mask: torch.Tensor  # [H, W] bool

    @property
    def K(self) -> int:
        return len(self.frames)


def prepare_chunks(clips: list[Clip], world: WorldConfig, T: int, tau: int, scheme: str = "TRE",
                   codec: CodecConfig = DEFAULT_CODEC) -> ChunkBatch:
    frames = torch.from_numpy(np.stack([c.frames for c in clips]))
    audio = torch.from_numpy(np.stack([c.audio for c in clips]))
    ref = torch.from_numpy(np.stack([c.identity_image for c in clips]))
    K = frames.shape[1] // T
    identity = build_identity(ref, T, scheme, codec)
    chunk_frames, latents, conds = [], [], []
    kappa: ContinuityRef = continuity_from_reference(ref, tau, codec)
    for k in range(K):
        f = frames[:, k * T : (k + 1) * T]
        chunk_frames.append(f)
        latents.append(encode(f, codec).data)
        conds.append(ConditioningBundle(build_audio_condition(audio[:, k * T : (k + 1) * T], codec), identity, kappa))
        kappa = continuity_from_gt(f, tau, codec)
    return ChunkBatch(chunk_frames, latents, conds, identity, ref, torch.from_numpy(face_mask(world)))
