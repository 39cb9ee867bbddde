"""Velocity network, flow-matching path/loss, Euler sampler and score conversion."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import ConditioningBundle, assemble_input
from .errors import ChunkflowError

ROLES = ("teacher", "student", "critic", "generic")
SKIP_FLOOR = 0.02


@dataclass(frozen=True)
class ModelConfig:
    latent_length: int = 5
    latent_hw: tuple[int, int] = (8, 8)
    channels: int = 16
    context_length: int = 2
    audio_dim: int = 4
    dim: int = 64
    heads: int = 4
    depth: int = 2
    ffn_mult: int = 4
    time_freqs: int = 64
    zero_head: bool = True

    @property
    def token_in(self) -> int:
        h, w = self.latent_hw
        return h * w * 2 * self.channels

    @property
    def token_out(self) -> int:
        h, w = self.latent_hw
        return h * w * self.channels


def timestep_embedding(t: torch.Tensor, n: int) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1]; t has shape [B]."""
    half = n // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(200.0), half, dtype=t.dtype))
    args = t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ffn_mult * dim)
        self.ff2 = nn.Linear(ffn_mult * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, n, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).reshape(B, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(att.transpose(1, 2).reshape(B, n, d))
        return x + self.ff2(F.gelu(self.ff1(self.norm2(x))))


class VelocityNet(nn.Module):
    """v(t, x_in, c_a, kappa) over one latent chunk.

    Every latent position becomes one target token; continuity latents become
    context tokens through the same embedding (zero-padded to 2C channels) plus
    a learned context-type vector. Context outputs are discarded.

    The output is ``(head(tokens) - g(t) * x_noisy) / (1 - t)``: the token head
    supplies a clean-latent estimate and the gated skip carries the per-element
    noise that a 64-wide token cannot hold.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), role: str = "generic", seed: int = 0):
        super().__init__()
        if role not in ROLES:
            raise ChunkflowError("model-role", f"unknown role {role!r}")
        object.__setattr__(self, "_role", role)
        object.__setattr__(self, "_frozen", False)
        self.config = config
        d = config.dim
        self.embed = nn.Linear(config.token_in, d)
        self.context_type = nn.Parameter(torch.zeros(d))
        self.target_pos = nn.Parameter(torch.zeros(config.latent_length, d))
        self.context_pos = nn.Parameter(torch.zeros(config.context_length, d))
        self.time_proj = nn.Linear(config.time_freqs, d)
        self.audio_proj = nn.Linear(config.audio_dim, d)
        self.blocks = nn.ModuleList(_Block(d, config.heads, config.ffn_mult) for _ in range(config.depth))
        self.norm_out = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.token_out)
        # time-gated skip from the noisy channels; part of the output head, zero at init
        self.skip_proj = nn.Linear(config.time_freqs, 1)
        self._init(seed)

    def _init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if ".norm" in name or name.startswith("norm"):
                    continue
                if name.endswith("bias"):
                    p.zero_()
                    continue
                if p.ndim == 2 and not name.endswith("_pos"):
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[1]))
                else:
                    p.copy_(0.1 * torch.randn(p.shape, generator=gen))
            if self.config.zero_head:
                for layer in (self.head, self.skip_proj):
                    layer.weight.zero_()
                    layer.bias.zero_()

    # -- role / freezing ---------------------------------------------------

    @property
    def role(self) -> str:
        return self._role

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def freeze(self) -> "VelocityNet":
        for p in self.parameters():
            p.requires_grad_(False)
        object.__setattr__(self, "_frozen", True)
        return self

    def check_writable(self) -> None:
        if self._frozen:
            raise ChunkflowError("frozen-params", f"{self._role} parameters are frozen")

    def trainable_parameters(self):
        self.check_writable()
        return [p for p in self.parameters()]

    def __setattr__(self, name, value):
        if name in ("_role",):
            raise ChunkflowError("model-role", "role is immutable")
        if getattr(self, "_frozen", False) and name not in ("training",):
            raise ChunkflowError("frozen-params", f"cannot set {name!r} on frozen parameters")
        super().__setattr__(name, value)

    def load_state_dict(self, state_dict, strict: bool = True, assign: bool = False):
        self.check_writable()
        return super().load_state_dict(state_dict, strict=strict, assign=assign)

    def clone(self, role: str) -> "VelocityNet":
        """Unfrozen copy with a new role (how student and critic start from the teacher)."""
        other = VelocityNet(self.config, role=role).to(next(self.parameters()).dtype)
        with torch.no_grad():
            for dst, src in zip(other.parameters(), self.parameters()):
                dst.copy_(src)
        return other

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.state_dict().items():
            h.update(name.encode())
            h.update(p.detach().contiguous().cpu().numpy().tobytes())
        return h.hexdigest()

    # -- forward -------------------------------------------------------------

    def forward(self, t, x_in: torch.Tensor, audio: torch.Tensor, kappa: torch.Tensor | None) -> torch.Tensor:
        cfg = self.config
        unbatched = x_in.ndim == 4
        if unbatched:
            x_in = x_in.unsqueeze(0)
            audio = audio.unsqueeze(0)
            kappa = None if kappa is None else kappa.unsqueeze(0)
        B, L, h, w, _ = x_in.shape
        dtype = self.embed.weight.dtype
        t = torch.as_tensor(t, dtype=dtype)
        t = t.expand(B) if t.ndim == 0 else t.reshape(B)

        tokens = self.embed(x_in.reshape(B, L, -1).to(dtype)) + self.target_pos[:L]
        tokens = tokens + self.audio_proj(audio.to(dtype))
        if kappa is not None:
            Lk = kappa.shape[1]
            padded = torch.cat([kappa.to(dtype), torch.zeros_like(kappa, dtype=dtype)], dim=-1)
            ctx = self.embed(padded.reshape(B, Lk, -1)) + self.context_type + self.context_pos[:Lk]
            tokens = torch.cat([ctx, tokens], dim=1)
        temb = timestep_embedding(t, cfg.time_freqs)
        tokens = tokens + self.time_proj(temb)[:, None, :]
        for block in self.blocks:
            tokens = block(tokens)
        out = self.head(self.norm_out(tokens[:, -L:])).reshape(B, L, h, w, cfg.channels)
        noisy = x_in[..., : cfg.channels].to(dtype)
        gate = self.skip_proj(temb).reshape(B, 1, 1, 1, 1)
        out = (out - gate * noisy) / (1 - t).clamp_min(SKIP_FLOOR).reshape(B, 1, 1, 1, 1)
        return out[0] if unbatched else out


ModelParams = VelocityNet


def velocity(params: VelocityNet, t, x_in: torch.Tensor, conds: ConditioningBundle, use_context: bool = True) -> torch.Tensor:
    """Forward pass from a conditioning bundle; the continuity provenance is metadata only."""
    kappa = conds.continuity.latents if use_context else None
    for name, tensor in (("x_in", x_in), ("audio", conds.audio.per_latent), ("kappa", kappa)):
        if tensor is not None and not torch.isfinite(tensor).all():
            raise ChunkflowError("nan-input", f"non-finite values in {name}")
    t = torch.as_tensor(t)
    if ((t < 0) | (t > 1)).any():
        raise ChunkflowError("t-range", "t must lie in [0, 1]")
    return params(t, x_in, conds.audio.per_latent, kappa)


# -- flow matching ----------------------------------------------------------


@dataclass(frozen=True)
class FlowSample:
    t: torch.Tensor  # [B] (or scalar)
    x0: torch.Tensor
    x1: torch.Tensor
    xt: torch.Tensor
    target: torch.Tensor


def _bcast(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def make_flow_sample(t, x0: torch.Tensor, x1: torch.Tensor) -> FlowSample:
    tb = _bcast(t, x1)
    return FlowSample(torch.as_tensor(t, dtype=x1.dtype), x0, x1, (1 - tb) * x0 + tb * x1, x1 - x0)


def sample_timesteps(n: int, generator: torch.Generator, t_min: float = 0.02, t_max: float = 0.98,
                     discrete: bool = False, dtype=torch.float32) -> torch.Tensor:
    """Uniform t in [t_min, t_max]; ``discrete`` snaps to a 1000-point grid."""
    u = torch.rand(n, generator=generator, dtype=torch.float64)
    if discrete:
        grid = torch.arange(1000, dtype=torch.float64) / 999
        grid = grid[(grid >= t_min) & (grid <= t_max)]
        return grid[(u * len(grid)).long().clamp(max=len(grid) - 1)].to(dtype)
    return (t_min + (t_max - t_min) * u).to(dtype)


def sample_path(x1: torch.Tensor, generator: torch.Generator, t_min: float = 0.02, t_max: float = 0.98,
                discrete: bool = False) -> FlowSample:
    """Draw t and Gaussian noise for a batch ``x1`` of shape [B, ...]."""
    t = sample_timesteps(x1.shape[0], generator, t_min, t_max, discrete, x1.dtype)
    x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    return make_flow_sample(t, x0, x1)


def fm_loss(params: VelocityNet, sample: FlowSample, conds: ConditioningBundle) -> torch.Tensor:
    pred = velocity(params, sample.t, assemble_input(sample.xt, conds.identity), conds)
    return (pred - sample.target).pow(2).mean()


# -- sampling -----------------------------------------------------------------


def euler_integrate(field: Callable[[float, torch.Tensor], torch.Tensor], z: torch.Tensor, n_steps: int) -> torch.Tensor:
    if n_steps < 1:
        raise ChunkflowError("steps", "need at least one Euler step")
    x = z
    for i in range(n_steps):
        x = x + field(i / n_steps, x) / n_steps
    return x


def euler_sample(params: VelocityNet, z: torch.Tensor, conds: ConditioningBundle, n_steps: int) -> torch.Tensor:
    """Integrate dx/dt = v from t=0 (noise) to t=1; differentiable through every step."""
    return euler_integrate(
        lambda t, x: velocity(params, torch.tensor(t, dtype=x.dtype), assemble_input(x, conds.identity), conds),
        z,
        n_steps,
    )


def score_from_velocity(v: torch.Tensor, xt: torch.Tensor, t) -> torch.Tensor:
    """Marginal score implied by a velocity on the linear Gaussian path: (t*v - x_t)/(1 - t)."""
    t = torch.as_tensor(t, dtype=xt.dtype)
    if (t >= 1 - 1e-6).any():
        raise ChunkflowError("t-singularity", "score conversion needs t < 1")
    tb = _bcast(t, xt)
    return (tb * v - xt) / (1 - tb)
