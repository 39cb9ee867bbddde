"""Teacher pre-training on ground-truth continuity references."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .codec import DEFAULT_CODEC, CodecConfig, decode
from .conditioning import ConditioningBundle, assemble_input
from .data import ChunkBatch, ClipSource, prepare_chunks
from .errors import ChunkflowError
from .toy_world import WorldConfig
from .velocity import FlowSample, ModelConfig, VelocityNet, fm_loss, make_flow_sample, sample_path, velocity

LOG_COLUMNS = ("step", "loss_total", "loss_diff", "loss_temp", "loss_facial", "wall_ms")


@dataclass(frozen=True)
class TeacherConfig:
    steps: int = 3000
    batch: int = 8
    chunks_per_clip: int = 3
    chunk_frames: int = 17
    tau: int = 5
    lambda_temp: float = 1.0
    lambda_facial: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    t_min: float = 0.02
    t_max: float = 0.98
    discrete_t: bool = False
    identity_scheme: str = "TRE"
    val_clips: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0 or self.batch <= 0 or self.chunks_per_clip <= 0:
            raise ChunkflowError("teacher-config", "steps, batch and chunks_per_clip must be positive")
        if self.lambda_temp < 0 or self.lambda_facial < 0:
            raise ChunkflowError("teacher-config", "loss weights must be non-negative")


@dataclass
class TeacherResult:
    model: VelocityNet
    log: list[dict] = field(default_factory=list)
    val_loss: float = float("nan")
    baseline_loss: float = float("nan")


def one_step_denoised(params: VelocityNet, sample: FlowSample, conds: ConditioningBundle, T: int,
                      codec: CodecConfig = DEFAULT_CODEC, v: torch.Tensor | None = None) -> torch.Tensor:
    """Decoded one-step estimate D(x_t + (1 - t) v)."""
    if v is None:
        v = velocity(params, sample.t, assemble_input(sample.xt, conds.identity), conds)
    t = sample.t.reshape(sample.t.shape + (1,) * (sample.xt.ndim - sample.t.ndim))
    return decode(sample.xt + (1 - t) * v, T, codec)


def temp_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared mismatch of adjacent-frame differences; frames on axis -3."""
    return (pred.diff(dim=-3) - gt.diff(dim=-3)).pow(2).mean()


def facial_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Squared error over masked pixels, normalised by (masked pixels x frames x batch)."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    sq = (pred - gt).pow(2)[..., mask]
    return sq.mean()


def chunk_losses(params: VelocityNet, batch: ChunkBatch, generator: torch.Generator, config: TeacherConfig,
                 codec: CodecConfig = DEFAULT_CODEC) -> dict[str, torch.Tensor]:
    """Composite objective averaged over the K chunks of one batch."""
    T = config.chunk_frames
    diff = temp = facial = 0.0
    for k in range(batch.K):
        conds = batch.conds_gt[k]
        if conds.continuity.provenance == "gen":
            raise ChunkflowError("provenance", "teacher must never see generated references")
        sample = sample_path(batch.latents[k], generator, config.t_min, config.t_max, config.discrete_t)
        v = velocity(params, sample.t, assemble_input(sample.xt, conds.identity), conds)
        diff = diff + (v - sample.target).pow(2).mean()
        pred_frames = one_step_denoised(params, sample, conds, T, codec, v=v)
        temp = temp + temp_loss(pred_frames, batch.frames[k])
        facial = facial + facial_loss(pred_frames, batch.frames[k], batch.mask)
    diff, temp, facial = diff / batch.K, temp / batch.K, facial / batch.K
    total = diff + config.lambda_temp * temp + config.lambda_facial * facial
    return {"loss_total": total, "loss_diff": diff, "loss_temp": temp, "loss_facial": facial}


def validation_set(world: WorldConfig, config: TeacherConfig, codec: CodecConfig = DEFAULT_CODEC):
    source = ClipSource(world, config.chunks_per_clip * config.chunk_frames, seed=10_000 + config.seed)
    batch = prepare_chunks(source.batch(0, config.val_clips), world, config.chunk_frames, config.tau,
                           config.identity_scheme, codec)
    gen = torch.Generator().manual_seed(777 + config.seed)
    samples = [sample_path(x, gen, config.t_min, config.t_max) for x in batch.latents]
    return batch, samples


@torch.no_grad()
def validation_loss(params: VelocityNet | None, batch: ChunkBatch, samples: list[FlowSample]) -> float:
    """Flow-matching loss on a fixed validation set; ``params=None`` gives the zero-velocity baseline."""
    total = 0.0
    for k, sample in enumerate(samples):
        if params is None:
            total += sample.target.pow(2).mean().item()
        else:
            total += fm_loss(params, sample, batch.conds_gt[k]).item()
    return total / len(samples)


def train_teacher(config: TeacherConfig, world: WorldConfig = WorldConfig(), codec: CodecConfig = DEFAULT_CODEC,
                  model_config: ModelConfig | None = None, log_path: Path | None = None,
                  source: ClipSource | None = None) -> TeacherResult:
    torch.manual_seed(config.seed)
    model_config = model_config or ModelConfig(audio_dim=world.audio_dim, latent_hw=(world.height // 2, world.width // 2),
                                               channels=codec.channels,
                                               latent_length=codec.latent_length(config.chunk_frames),
                                               context_length=codec.latent_length(config.tau))
    model = VelocityNet(model_config, role="teacher", seed=config.seed)
    opt = torch.optim.AdamW(model.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    source = source or ClipSource(world, config.chunks_per_clip * config.chunk_frames, seed=config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    log = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        for step in range(config.steps):
            t0 = time.perf_counter()
            batch = prepare_chunks(source.batch(step * config.batch, config.batch), world, config.chunk_frames,
                                   config.tau, config.identity_scheme, codec)
            losses = chunk_losses(model, batch, gen, config, codec)
            if not torch.isfinite(losses["loss_total"]):
                raise ChunkflowError("teacher-diverged", f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            losses["loss_total"].backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            row = {"step": step, **{k: float(v.detach()) for k, v in losses.items()},
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            log.append(row)
            if writer is not None:
                writer.writerow([row["step"]] + [repr(row[c]) for c in LOG_COLUMNS[1:-1]] + [f"{row['wall_ms']:.3f}"])
    finally:
        if fh is not None:
            fh.close()
    val_batch, val_samples = validation_set(world, config, codec)
    result = TeacherResult(model.freeze(), log)
    result.val_loss = validation_loss(model, val_batch, val_samples)
    result.baseline_loss = validation_loss(None, val_batch, val_samples)
    return result
