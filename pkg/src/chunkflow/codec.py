"""Exact causal spatio-temporal Haar codec.

Stands in for a frozen causal video VAE: frame 0 is compressed spatially only,
every following block of ``stride`` frames is compressed in space and time.
All transforms are orthonormal, so decoding is the transpose of encoding.

Latent channel layout is ``temporal_index * 4 + spatial_subband``; the head
latent only fills the first four channels (temporal index 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .errors import ChunkflowError


@dataclass(frozen=True)
class CodecConfig:
    spatial_block: int = 2
    temporal_stride: int = 4

    def __post_init__(self):
        s = self.temporal_stride
        if self.spatial_block != 2:
            raise ChunkflowError("codec-config", "spatial_block is fixed at 2")
        if s < 1 or s & (s - 1):
            raise ChunkflowError("codec-config", "temporal_stride must be a power of two")

    @property
    def channels(self) -> int:
        return 4 * self.temporal_stride

    def latent_length(self, T: int) -> int:
        check_frames(T, self)
        return 1 + (T - 1) // self.temporal_stride


DEFAULT_CODEC = CodecConfig()


@dataclass
class LatentChunk:
    data: torch.Tensor  # [..., L, h, w, C]
    head_is_spatial_only: bool = True

    @property
    def L(self) -> int:
        return self.data.shape[-4]

    def detach(self) -> "LatentChunk":
        return LatentChunk(self.data.detach(), self.head_is_spatial_only)


def check_frames(T: int, config: CodecConfig = DEFAULT_CODEC) -> None:
    if T < 1 or (T - 1) % config.temporal_stride:
        raise ChunkflowError("codec-shape", f"T={T} violates (T-1) mod {config.temporal_stride} == 0")


@lru_cache(maxsize=None)
def _haar_matrix(n: int) -> np.ndarray:
    """Orthonormal multi-level Haar analysis matrix (rows = coefficients, DC first)."""
    if n == 1:
        return np.ones((1, 1))
    half = _haar_matrix(n // 2)
    avg = np.kron(half, [1.0, 1.0]) / math.sqrt(2)
    diff = np.kron(np.eye(n // 2), [1.0, -1.0]) / math.sqrt(2)
    return np.vstack([avg, diff])


@lru_cache(maxsize=None)
def _spatial_matrix() -> np.ndarray:
    # pixel order (a, b, c, d) = (top-left, top-right, bottom-left, bottom-right)
    return 0.5 * np.array(
        [
            [1, 1, 1, 1],  # LL
            [1, -1, 1, -1],  # horizontal detail
            [1, 1, -1, -1],  # vertical detail
            [1, -1, -1, 1],  # diagonal detail
        ],
        dtype=np.float64,
    )


def _mat(arr: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(arr, dtype=like.dtype, device=like.device)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.float()
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


def _space_to_channel(frames: torch.Tensor) -> torch.Tensor:
    """[..., H, W] -> [..., H/2, W/2, 4] spatial Haar coefficients."""
    *lead, H, W = frames.shape
    blocks = frames.reshape(*lead, H // 2, 2, W // 2, 2)
    blocks = blocks.movedim(-3, -2).reshape(*lead, H // 2, W // 2, 4)
    return blocks @ _mat(_spatial_matrix(), frames).T


def _channel_to_space(coeffs: torch.Tensor) -> torch.Tensor:
    *lead, h, w, _ = coeffs.shape
    pix = coeffs @ _mat(_spatial_matrix(), coeffs)
    return pix.reshape(*lead, h, w, 2, 2).movedim(-2, -3).reshape(*lead, 2 * h, 2 * w)


def encode(frames, config: CodecConfig = DEFAULT_CODEC) -> LatentChunk:
    """Encode ``[..., T, H, W]`` frames into ``[..., L, H/2, W/2, C]`` latents."""
    frames = _as_tensor(frames)
    if frames.ndim < 3:
        raise ChunkflowError("codec-shape", f"expected [..., T, H, W], got {tuple(frames.shape)}")
    *lead, T, H, W = frames.shape
    check_frames(T, config)
    if H % 2 or W % 2:
        raise ChunkflowError("codec-shape", f"H and W must be even, got {H}x{W}")
    s, C = config.temporal_stride, config.channels
    spatial = _space_to_channel(frames)  # [..., T, h, w, 4]
    head = torch.cat([spatial[..., :1, :, :, :], spatial.new_zeros(*lead, 1, H // 2, W // 2, C - 4)], dim=-1)
    n_body = (T - 1) // s
    if n_body == 0:
        return LatentChunk(head)
    body = spatial[..., 1:, :, :, :].reshape(*lead, n_body, s, H // 2, W // 2, 4)
    body = torch.einsum("ks,...jshwc->...jhwkc", _mat(_haar_matrix(s), frames), body)
    body = body.reshape(*lead, n_body, H // 2, W // 2, C)
    return LatentChunk(torch.cat([head, body], dim=-4))


def decode(latent, T: int, config: CodecConfig = DEFAULT_CODEC) -> torch.Tensor:
    data = latent.data if isinstance(latent, LatentChunk) else _as_tensor(latent)
    check_frames(T, config)
    s, C = config.temporal_stride, config.channels
    if data.ndim < 4 or data.shape[-4] != 1 + (T - 1) // s or data.shape[-1] != C:
        raise ChunkflowError("codec-shape", f"latent {tuple(data.shape)} inconsistent with T={T}")
    *lead, L, h, w, _ = data.shape
    head = _channel_to_space(data[..., :1, :, :, :4])  # [..., 1, H, W]
    if L == 1:
        return head
    body = data[..., 1:, :, :, :].reshape(*lead, L - 1, h, w, s, 4)
    body = torch.einsum("ks,...jhwkc->...jshwc", _mat(_haar_matrix(s), data), body)
    body = _channel_to_space(body.reshape(*lead, (L - 1) * s, h, w, 4))
    return torch.cat([head, body], dim=-3)


def decode_then_reencode_tail(latent, T: int, tau: int, config: CodecConfig = DEFAULT_CODEC) -> LatentChunk:
    """Re-encode the last ``tau`` decoded frames so their first frame takes the head role."""
    if tau < 1 or (tau - 1) % config.temporal_stride or tau > T:
        raise ChunkflowError("tau-stride", f"tau={tau} needs (tau-1) mod {config.temporal_stride} == 0 and tau <= T")
    frames = decode(latent, T, config)
    return encode(frames[..., T - tau :, :, :], config)


def naive_tail_slice(latent, tau: int, config: CodecConfig = DEFAULT_CODEC) -> LatentChunk:
    """Reuse the last latents directly (the positional-role mismatch the re-encode avoids)."""
    data = latent.data if isinstance(latent, LatentChunk) else _as_tensor(latent)
    n = 1 + (tau - 1) // config.temporal_stride
    return LatentChunk(data[..., -n:, :, :, :], head_is_spatial_only=False)
