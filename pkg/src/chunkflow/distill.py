"""Distribution-matching distillation of the frozen teacher into a few-step student.

The conditioning topology is the point of this module. In ``asymmetric`` mode
the teacher scores student samples under ground-truth continuity references
while the student and the fake-score critic only ever see references rebuilt
from the student's own previous chunk. The two symmetric modes are ablations.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .codec import DEFAULT_CODEC, CodecConfig
from .conditioning import ConditioningBundle, ContinuityRef, assemble_input, continuity_from_generated
from .data import ChunkBatch, ClipSource, prepare_chunks
from .errors import ChunkflowError
from .toy_world import WorldConfig
from .velocity import VelocityNet, euler_sample, make_flow_sample, sample_timesteps, score_from_velocity, velocity

MODES = ("asymmetric", "symmetric_gt", "symmetric_gen")
LOG_COLUMNS = ("step", "loss_dmd", "loss_reg", "loss_critic", "w_t_mean", "mode", "wall_ms")

# which continuity reference each network sees, per mode
ROUTING = {
    "asymmetric": {"student": "gen", "teacher": "gt", "critic": "gen"},
    "symmetric_gt": {"student": "gt", "teacher": "gt", "critic": "gt"},
    "symmetric_gen": {"student": "gen", "teacher": "gen", "critic": "gen"},
}


@dataclass(frozen=True)
class DistillConfig:
    mode: str = "asymmetric"
    student_steps: int = 4
    lambda_reg: float = 0.2
    dmd_weight: float = 1.0
    critic_updates_per_student: int = 2
    chunks: int = 3
    chunk_frames: int = 17
    tau: int = 5
    t_min: float = 0.02
    t_max: float = 0.98
    w_floor: float = 1e-3
    steps: int = 800
    batch: int = 4
    lr_student: float = 1e-4
    lr_critic: float = 2e-4
    grad_clip: float = 1.0
    identity_scheme: str = "TRE"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ChunkflowError("distill-config", f"mode must be one of {MODES}")
        if self.student_steps < 1 or self.lambda_reg < 0 or self.steps < 0:
            raise ChunkflowError("distill-config", "need student_steps >= 1, lambda_reg >= 0, steps >= 0")


@dataclass
class DistillState:
    student: VelocityNet
    critic: VelocityNet
    teacher: VelocityNet
    step: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)

    @classmethod
    def from_teacher(cls, teacher: VelocityNet, seed: int = 0) -> "DistillState":
        if not teacher.frozen:
            raise ChunkflowError("teacher-not-frozen", "distillation needs a frozen teacher")
        return cls(teacher.clone("student"), teacher.clone("critic"), teacher,
                   generator=torch.Generator().manual_seed(int(seed) + 4242))


def generate_student_chunk(student: VelocityNet, z: torch.Tensor, conds: ConditioningBundle, n_steps: int) -> torch.Tensor:
    """Few-step Euler sample; gradients flow through every step."""
    return euler_sample(student, z, conds, n_steps)


def dmd_weight(t: torch.Tensor, gap: torch.Tensor, floor: float) -> torch.Tensor:
    """(1 - t)^2 / max(mean |gap|, floor), one value per batch row."""
    scale = gap.abs().flatten(1).mean(dim=1).clamp_min(floor)
    return (1 - t) ** 2 / scale


def dmd_surrogate(x_hat: torch.Tensor, real_field, fake_field, t: torch.Tensor, eps: torch.Tensor,
                  w_floor: float = 1e-3) -> tuple[torch.Tensor, dict]:
    """Core of the student's distribution-matching term for arbitrary velocity fields.

    ``real_field`` / ``fake_field`` map (x_t, t) to a velocity. The scores they
    imply are treated as constants, so the gradient of the returned scalar with
    respect to ``x_hat`` is w(t) * (s_fake - s_real) per batch row.
    """
    with torch.no_grad():
        path = make_flow_sample(t, eps, x_hat.detach())
        gap = score_from_velocity(fake_field(path.xt, t), path.xt, t) - score_from_velocity(real_field(path.xt, t), path.xt, t)
        w = dmd_weight(t, gap, w_floor)
    grad = w.reshape(-1, *([1] * (x_hat.ndim - 1))) * gap
    surrogate = (grad * x_hat).flatten(1).sum(dim=1).mean()
    return surrogate, {"t": t, "w": w, "gap": gap}


def dmd_student_loss(teacher: VelocityNet, critic: VelocityNet, x_hat: torch.Tensor, conds_real: ConditioningBundle,
                     conds_fake: ConditioningBundle, generator: torch.Generator | None = None, *,
                     t_min: float = 0.02, t_max: float = 0.98, w_floor: float = 1e-3,
                     t: torch.Tensor | None = None, eps: torch.Tensor | None = None) -> tuple[torch.Tensor, dict]:
    """Teacher scores under ``conds_real``, critic scores under ``conds_fake``.

    ``x_hat`` is batched [B, ...]; the surrogate sums over elements and averages
    over the batch.
    """
    B = x_hat.shape[0]
    if t is None:
        t = sample_timesteps(B, generator, t_min, t_max, dtype=x_hat.dtype)
    t = torch.as_tensor(t, dtype=x_hat.dtype).reshape(-1).expand(B)
    if ((t < t_min) | (t > t_max)).any():
        raise ChunkflowError("t-singularity", f"t must stay inside [{t_min}, {t_max}]")
    if eps is None:
        eps = torch.randn(x_hat.shape, generator=generator, dtype=x_hat.dtype)

    def real(xt, tt):
        return velocity(teacher, tt, assemble_input(xt, conds_real.identity), conds_real)

    def fake(xt, tt):
        return velocity(critic, tt, assemble_input(xt, conds_fake.identity), conds_fake)

    return dmd_surrogate(x_hat, real, fake, t, eps, w_floor)


def critic_loss(critic: VelocityNet, x_hat: torch.Tensor, conds_fake: ConditioningBundle,
                generator: torch.Generator | None = None, *, t_min: float = 0.02, t_max: float = 0.98,
                t: torch.Tensor | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
    """Flow-matching loss of the critic on stop-gradient student samples."""
    x_hat = x_hat.detach()
    if t is None:
        t = sample_timesteps(x_hat.shape[0], generator, t_min, t_max, dtype=x_hat.dtype)
    if eps is None:
        eps = torch.randn(x_hat.shape, generator=generator, dtype=x_hat.dtype)
    path = make_flow_sample(t, eps, x_hat)
    pred = velocity(critic, path.t, assemble_input(path.xt, conds_fake.identity), conds_fake)
    return (pred - path.target).pow(2).mean()


def regression_anchor(x_hat: torch.Tensor, x_gt: torch.Tensor) -> torch.Tensor:
    """Huber-style anchor with the threshold on the global L1 norm of the residual."""
    r = x_hat - x_gt
    l1 = r.abs().sum()
    if l1 <= 1:
        return 0.5 * r.pow(2).sum()
    return l1 - 0.5


def regression_anchor_batched(x_hat: torch.Tensor, x_gt: torch.Tensor) -> torch.Tensor:
    """``regression_anchor`` per batch row, averaged."""
    return torch.stack([regression_anchor(a, b) for a, b in zip(x_hat, x_gt)]).mean()


def _with_continuity(conds: ConditioningBundle, kappa: ContinuityRef) -> ConditioningBundle:
    return ConditioningBundle(conds.audio, conds.identity, kappa)


def _check_topology(mode: str, k: int, student: str, teacher: str, critic: str) -> None:
    if mode == "asymmetric":
        if teacher == "gen":
            raise ChunkflowError("topology", f"chunk {k}: generated reference reached the teacher")
        if k >= 1 and (student == "gt" or critic == "gt"):
            raise ChunkflowError("topology", f"chunk {k}: ground-truth reference reached student/critic")
    if mode == "symmetric_gt" and student == "gen":
        raise ChunkflowError("topology", f"chunk {k}: student saw a generated reference in symmetric_gt")


@dataclass
class StepOutput:
    loss_student: torch.Tensor
    loss_dmd: float
    loss_reg: float
    w_mean: float
    samples: list[torch.Tensor]
    critic_conds: list[ConditioningBundle]
    provenance: list[dict]


def student_step_losses(state: DistillState, batch: ChunkBatch, config: DistillConfig,
                        codec: CodecConfig = DEFAULT_CODEC) -> StepOutput:
    """Roll the student through the K chunks of ``batch`` and accumulate the student objective."""
    route = ROUTING[config.mode]
    gen = state.generator
    kappa_gen: ContinuityRef = batch.conds_gt[0].continuity  # chunk 1 uses the replicated reference
    total = 0.0
    dmd_sum = reg_sum = w_sum = 0.0
    samples, critic_conds, provenance = [], [], []
    for k in range(batch.K):
        gt_conds = batch.conds_gt[k]
        gen_conds = _with_continuity(gt_conds, kappa_gen)
        pick = {"gt": gt_conds, "gen": gen_conds}
        s_c, t_c, c_c = pick[route["student"]], pick[route["teacher"]], pick[route["critic"]]
        prov = {"student": s_c.continuity.provenance, "teacher": t_c.continuity.provenance,
                "critic": c_c.continuity.provenance}
        _check_topology(config.mode, k, **prov)
        provenance.append(prov)

        z = torch.randn(batch.latents[k].shape, generator=gen)
        x_hat = generate_student_chunk(state.student, z, s_c, config.student_steps)
        surrogate, info = dmd_student_loss(state.teacher, state.critic, x_hat, t_c, c_c, gen,
                                           t_min=config.t_min, t_max=config.t_max, w_floor=config.w_floor)
        reg = regression_anchor_batched(x_hat, batch.latents[k])
        total = total + config.dmd_weight * surrogate + config.lambda_reg * reg
        dmd_sum += float(surrogate.detach())
        reg_sum += float(reg.detach())
        w_sum += float(info["w"].mean())
        samples.append(x_hat.detach())
        critic_conds.append(c_c)
        if route["student"] == "gen" or route["teacher"] == "gen" or route["critic"] == "gen":
            kappa_gen = continuity_from_generated(x_hat.detach(), config.chunk_frames, config.tau, codec)
    K = batch.K
    return StepOutput(total / K, dmd_sum / K, reg_sum / K, w_sum / K, samples, critic_conds, provenance)


@dataclass
class DistillResult:
    student: VelocityNet
    critic: VelocityNet
    log: list[dict]
    teacher_fingerprint_before: str
    teacher_fingerprint_after: str


def distill(config: DistillConfig, teacher: VelocityNet, world: WorldConfig = WorldConfig(),
            codec: CodecConfig = DEFAULT_CODEC, log_path: Path | None = None,
            source: ClipSource | None = None) -> DistillResult:
    if not teacher.frozen:
        raise ChunkflowError("teacher-not-frozen", "distillation needs a frozen teacher")
    torch.manual_seed(config.seed)
    before = teacher.fingerprint()
    state = DistillState.from_teacher(teacher, config.seed)
    opt_s = torch.optim.AdamW(state.student.trainable_parameters(), lr=config.lr_student, weight_decay=0.0)
    opt_c = torch.optim.AdamW(state.critic.trainable_parameters(), lr=config.lr_critic, weight_decay=0.0)
    source = source or ClipSource(world, config.chunks * config.chunk_frames, seed=50_000 + config.seed)
    log = []
    fh = open(log_path, "w", newline="") if log_path is not None else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(LOG_COLUMNS)
    try:
        for step in range(config.steps):
            t0 = time.perf_counter()
            batch = prepare_chunks(source.batch(step * config.batch, config.batch), world, config.chunk_frames,
                                   config.tau, config.identity_scheme, codec)
            out = student_step_losses(state, batch, config, codec)
            if not torch.isfinite(out.loss_student):
                raise ChunkflowError("distill-diverged", f"non-finite student loss at step {step}")
            opt_s.zero_grad(set_to_none=True)
            out.loss_student.backward()
            torch.nn.utils.clip_grad_norm_(state.student.parameters(), config.grad_clip)
            opt_s.step()

            c_total = 0.0
            for _ in range(config.critic_updates_per_student):
                c_loss = sum(
                    critic_loss(state.critic, x, c, state.generator, t_min=config.t_min, t_max=config.t_max)
                    for x, c in zip(out.samples, out.critic_conds)
                ) / len(out.samples)
                if not torch.isfinite(c_loss):
                    raise ChunkflowError("distill-diverged", f"non-finite critic loss at step {step}")
                opt_c.zero_grad(set_to_none=True)
                c_loss.backward()
                torch.nn.utils.clip_grad_norm_(state.critic.parameters(), config.grad_clip)
                opt_c.step()
                c_total += float(c_loss.detach())
            state.step = step + 1
            row = {"step": step, "loss_dmd": out.loss_dmd, "loss_reg": out.loss_reg,
                   "loss_critic": c_total / max(config.critic_updates_per_student, 1), "w_t_mean": out.w_mean,
                   "mode": config.mode, "wall_ms": (time.perf_counter() - t0) * 1e3}
            log.append(row)
            if writer:
                writer.writerow([step, repr(row["loss_dmd"]), repr(row["loss_reg"]), repr(row["loss_critic"]),
                                 repr(row["w_t_mean"]), config.mode, f"{row['wall_ms']:.3f}"])
    finally:
        if fh:
            fh.close()
    after = teacher.fingerprint()
    if before != after:
        raise ChunkflowError("frozen-params", "teacher parameters changed during distillation")
    return DistillResult(state.student, state.critic, log, before, after)
