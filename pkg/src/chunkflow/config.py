"""Experiment configuration: nested dataclasses, JSON snapshots and dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .codec import CodecConfig
from .conditioning import SCHEMES
from .corpus import CorpusSpec, Thresholds
from .distill import DistillConfig
from .errors import ChunkflowError
from .rollout import RolloutConfig
from .teacher import TeacherConfig
from .toy_world import WorldConfig
from .velocity import ModelConfig


@dataclass(frozen=True)
class ModelSection:
    """Architecture knobs; shapes are derived from the world and codec."""

    dim: int = 64
    heads: int = 4
    depth: int = 2
    ffn_mult: int = 4
    time_freqs: int = 64


@dataclass(frozen=True)
class MetricsOptions:
    stride: int = 4
    window_chunks: int = 2
    eval_oracles: int = 3
    teacher_eval_steps: int = 50
    throughput_chunks: int = 5


@dataclass(frozen=True)
class AblationOptions:
    seeds: tuple[int, ...] = (0,)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelSection = field(default_factory=ModelSection)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    metrics: MetricsOptions = field(default_factory=MetricsOptions)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    thresholds: Thresholds = field(default_factory=Thresholds)
    ablation: AblationOptions = field(default_factory=AblationOptions)
    seed: int = 0

    def model_config(self) -> ModelConfig:
        T, tau = self.teacher.chunk_frames, self.teacher.tau
        return ModelConfig(
            latent_length=self.codec.latent_length(T),
            latent_hw=(self.world.height // 2, self.world.width // 2),
            channels=self.codec.channels,
            context_length=self.codec.latent_length(tau),
            audio_dim=self.world.audio_dim,
            **dataclasses.asdict(self.model),
        )


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Cross-module checks; raises ``config-invalid`` naming the first violated rule."""
    s = cfg.codec.temporal_stride
    T = cfg.teacher.chunk_frames
    tau = cfg.teacher.tau
    first = min(cfg.metrics.window_chunks, cfg.metrics.stride) * T
    first -= first % cfg.world.period
    feature_dim = (cfg.world.height // 4) * (cfg.world.width // 4)
    rules = [
        ((T - 1) % s == 0, f"chunk length T={T} must satisfy (T-1) mod {s} = 0"),
        ((tau - 1) % s == 0, f"continuity window tau={tau} must satisfy (tau-1) mod {s} = 0"),
        (tau <= T, f"tau={tau} must not exceed T={T}"),
        (cfg.distill.chunk_frames == T and cfg.rollout.T == T, "teacher, distill and rollout must share T"),
        (cfg.distill.tau == tau and cfg.rollout.tau == tau, "teacher, distill and rollout must share tau"),
        (cfg.teacher.identity_scheme in SCHEMES, f"identity_scheme must be one of {SCHEMES}"),
        (cfg.distill.identity_scheme == cfg.teacher.identity_scheme, "teacher and distill identity schemes differ"),
        (cfg.rollout.identity_scheme == cfg.teacher.identity_scheme, "teacher and rollout identity schemes differ"),
        (cfg.rollout.K >= 1 and cfg.rollout.N >= 1, "rollout needs K >= 1 and N >= 1"),
        (cfg.world.height % 8 == 0 and cfg.world.width % 8 == 0, "frame size must split into the 8x8 hash grid"),
        (cfg.metrics.stride >= 1 and cfg.metrics.window_chunks >= 1, "metrics stride and window must be >= 1"),
        (first > feature_dim, f"first metric window ({first} frames) must exceed the {feature_dim} pooled features"),
        (cfg.rollout.K >= cfg.metrics.stride, "rollout.K must be at least metrics.stride"),
        (cfg.metrics.throughput_chunks >= 5, "throughput needs at least 5 chunks"),
        (cfg.model.dim % cfg.model.heads == 0, "model dim must be divisible by heads"),
        (len(cfg.ablation.seeds) >= 1, "ablation needs at least one seed"),
    ]
    for ok, message in rules:
        if not ok:
            raise ChunkflowError("config-invalid", message)
    return cfg


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Set the global seed and push it into every seeded section."""
    return replace(
        cfg,
        seed=int(seed),
        teacher=replace(cfg.teacher, seed=int(seed)),
        distill=replace(cfg.distill, seed=int(seed)),
        rollout=replace(cfg.rollout, seed=int(seed)),
    )


# -- dict conversion -----------------------------------------------------------


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _coerce(value, hint):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ChunkflowError("config-invalid", f"expected an object for {hint.__name__}")
        return from_dict(hint, value)
    if origin is tuple:
        args = typing.get_args(hint)
        item = args[0] if args else typing.Any
        return tuple(_coerce(v, item) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ChunkflowError("config-invalid", f"expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ChunkflowError("config-invalid", f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ChunkflowError("config-invalid", f"expected a number, got {value!r}")
        return float(value)
    if hint is str and not isinstance(value, str):
        raise ChunkflowError("config-invalid", f"expected a string, got {value!r}")
    return value


def from_dict(cls, data: dict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ChunkflowError("config-invalid", f"unknown key(s) in {cls.__name__}: {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k]) for k, v in data.items()}
    return cls(**kwargs)


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments to a nested dict (values parsed as JSON when possible)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ChunkflowError("config-invalid", f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ChunkflowError("config-invalid", f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ChunkflowError("config-invalid", f"unknown config key {key!r}")
        value = _parse_scalar(raw)
        if isinstance(node[parts[-1]], float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides: list[str] = (), seed: int | None = None) -> ExperimentConfig:
    data = to_dict(ExperimentConfig())
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ChunkflowError("config-invalid", f"cannot read {path}: {err}") from err
        data = _merge(data, user)
    data = apply_overrides(data, list(overrides))
    try:
        cfg = from_dict(ExperimentConfig, data)
    except TypeError as err:
        raise ChunkflowError("config-invalid", str(err)) from err
    if seed is not None:
        cfg = with_seed(cfg, seed)
    return validate(cfg)


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def lineage_hash(cfg: ExperimentConfig) -> str:
    """Hash of the sections that determine what a checkpoint's tensors mean."""
    d = to_dict(cfg)
    payload = {k: d[k] for k in ("world", "codec", "model", "teacher")}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()
