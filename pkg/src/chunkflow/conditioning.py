"""Conditioning signals: audio condition, identity condition (TRE / ETR) and
continuity references with their provenance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import DEFAULT_CODEC, CodecConfig, LatentChunk, _as_tensor, check_frames, decode_then_reencode_tail, encode
from .errors import ChunkflowError

PROVENANCES = ("gt", "gen", "ref")
SCHEMES = ("TRE", "ETR")


@dataclass(frozen=True)
class AudioCondition:
    per_latent: torch.Tensor  # [..., L, d_a]
    alignment: tuple[tuple[int, int], ...]  # latent j -> half-open frame range


@dataclass(frozen=True)
class IdentityCondition:
    latents: torch.Tensor  # [..., L, h, w, C]
    scheme: str


@dataclass(frozen=True)
class ContinuityRef:
    """Continuity reference. Frozen, so provenance cannot change after construction."""

    latents: torch.Tensor  # [..., L_k, h, w, C]
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ChunkflowError("provenance", f"unknown provenance {self.provenance!r}")


def audio_alignment(T: int, config: CodecConfig = DEFAULT_CODEC) -> tuple[tuple[int, int], ...]:
    check_frames(T, config)
    s = config.temporal_stride
    return ((0, 1),) + tuple((1 + j * s, 1 + (j + 1) * s) for j in range((T - 1) // s))


def build_audio_condition(audio, config: CodecConfig = DEFAULT_CODEC) -> AudioCondition:
    audio = _as_tensor(audio)
    if audio.ndim < 2:
        raise ChunkflowError("audio-shape", f"expected [..., T, d_a], got {tuple(audio.shape)}")
    T = audio.shape[-2]
    if T < 1 or (T - 1) % config.temporal_stride:
        raise ChunkflowError("audio-shape", f"T={T} violates the codec stride rule")
    s = config.temporal_stride
    head = audio[..., :1, :]
    if T == 1:
        return AudioCondition(head, audio_alignment(T, config))
    body = audio[..., 1:, :].reshape(*audio.shape[:-2], (T - 1) // s, s, audio.shape[-1]).mean(dim=-2)
    return AudioCondition(torch.cat([head, body], dim=-2), audio_alignment(T, config))


def replicate(image, n: int) -> torch.Tensor:
    image = _as_tensor(image)
    return image.unsqueeze(-3).expand(*image.shape[:-2], n, *image.shape[-2:])


def build_tre(identity_image, T: int, config: CodecConfig = DEFAULT_CODEC) -> IdentityCondition:
    """Temporal Reference Encoding: replicate the image into a T-frame pseudo-video, then encode."""
    check_frames(T, config)
    return IdentityCondition(encode(replicate(identity_image, T), config).data, "TRE")


def encode_single(identity_image, config: CodecConfig = DEFAULT_CODEC) -> torch.Tensor:
    return encode(replicate(identity_image, 1), config).data


def build_etr(identity_image, L: int, config: CodecConfig = DEFAULT_CODEC) -> IdentityCondition:
    """Encode-then-repeat baseline: one spatial-only latent tiled L times."""
    head = encode_single(identity_image, config)
    reps = [1] * head.ndim
    reps[-4] = L
    return IdentityCondition(head.repeat(*reps), "ETR")


def build_identity(identity_image, T: int, scheme: str, config: CodecConfig = DEFAULT_CODEC) -> IdentityCondition:
    if scheme == "TRE":
        return build_tre(identity_image, T, config)
    if scheme == "ETR":
        return build_etr(identity_image, config.latent_length(T), config)
    raise ChunkflowError("identity-scheme", f"unknown scheme {scheme!r}")


def assemble_input(noisy, c_I: IdentityCondition) -> torch.Tensor:
    """Channel concat, noisy channels first: [..., L, h, w, 2C]."""
    data = noisy.data if isinstance(noisy, LatentChunk) else noisy
    cond = c_I.latents
    if data.shape[-4:] != cond.shape[-4:]:
        raise ChunkflowError("cond-shape", f"noisy {tuple(data.shape)} vs identity {tuple(cond.shape)}")
    if cond.shape != data.shape:
        cond = cond.expand_as(data)
    return torch.cat([data, cond.to(data.dtype)], dim=-1)


def continuity_from_gt(frames, tau: int, config: CodecConfig = DEFAULT_CODEC) -> ContinuityRef:
    frames = _as_tensor(frames)
    _check_tau(tau, frames.shape[-3], config)
    return ContinuityRef(encode(frames[..., -tau:, :, :], config).data, "gt")


def continuity_from_generated(latent, T: int, tau: int, config: CodecConfig = DEFAULT_CODEC) -> ContinuityRef:
    _check_tau(tau, T, config)
    return ContinuityRef(decode_then_reencode_tail(latent, T, tau, config).data, "gen")


def continuity_from_reference(identity_image, tau: int, config: CodecConfig = DEFAULT_CODEC) -> ContinuityRef:
    _check_tau(tau, tau, config)
    return ContinuityRef(encode(replicate(identity_image, tau), config).data, "ref")


def build_continuity(source: str, value, tau: int, T: int | None = None, config: CodecConfig = DEFAULT_CODEC) -> ContinuityRef:
    """Dispatch on ``source`` in {"gt", "gen", "ref"}.

    ``value`` is GT frames for "gt", a generated latent (with chunk length ``T``)
    for "gen", and the identity image for "ref".
    """
    if source == "gt":
        return continuity_from_gt(value, tau, config)
    if source == "gen":
        if T is None:
            raise ChunkflowError("cond-shape", "generated continuity needs the chunk frame count T")
        return continuity_from_generated(value, T, tau, config)
    if source == "ref":
        return continuity_from_reference(value, tau, config)
    raise ChunkflowError("provenance", f"unknown source {source!r}")


def _check_tau(tau: int, T: int, config: CodecConfig) -> None:
    if tau < 1 or (tau - 1) % config.temporal_stride or tau > T:
        raise ChunkflowError("tau-stride", f"tau={tau} invalid for stride {config.temporal_stride}, T={T}")


def stack_refs(refs: list[ContinuityRef]) -> ContinuityRef:
    """Batch references along a new leading axis; all must share one provenance."""
    kinds = {r.provenance for r in refs}
    if len(kinds) != 1:
        raise ChunkflowError("provenance", f"cannot stack mixed provenance {sorted(kinds)}")
    return ContinuityRef(torch.stack([r.latents for r in refs]), kinds.pop())


def as_numpy(x) -> np.ndarray:
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)


@dataclass(frozen=True)
class ConditioningBundle:
    audio: AudioCondition
    identity: IdentityCondition
    continuity: ContinuityRef
