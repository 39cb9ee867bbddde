"""Seeded pipelines behind the command-line subcommands.

Every function here writes into one run directory and returns a small summary
dict that ends up in ``run.json``.
"""

from __future__ import annotations

import csv
import json
import platform
import statistics
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, lineage_hash, to_dict, with_seed
from .corpus import (
    build_tuples,
    dedup,
    filter_records,
    read_manifest,
    resolve,
    standardize,
    synthetic_corpus,
    write_manifest,
)
from .distill import distill
from .errors import ChunkflowError
from .metrics import MetricsReport, drift_curve
from .rollout import RolloutConfig, measure_throughput, rollout, save_rollout
from .teacher import train_teacher
from .toy_world import ClipOracle
from .velocity import VelocityNet

# Fields that record wall-clock measurements; everything else in a run directory is reproducible bitwise.
VOLATILE_COLUMNS = ("wall_ms",)
VOLATILE_KEYS = ("fps", "fps_student", "fps_teacher", "speedup", "timing_ms")

EVAL_IDENTITY_SEED = 900_000
EVAL_CLIP_SEED = 910_000


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def versions() -> dict:
    return {"chunkflow": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__}


def snapshot(cfg: ExperimentConfig, out: Path) -> None:
    _write_json(out / "config.json", to_dict(cfg))


def eval_oracle(cfg: ExperimentConfig, i: int) -> ClipOracle:
    return ClipOracle(cfg.world, EVAL_IDENTITY_SEED + i, EVAL_CLIP_SEED + i)


def _scheme_config(cfg: ExperimentConfig, scheme: str) -> ExperimentConfig:
    return replace(
        cfg,
        teacher=replace(cfg.teacher, identity_scheme=scheme),
        distill=replace(cfg.distill, identity_scheme=scheme),
        rollout=replace(cfg.rollout, identity_scheme=scheme),
    )


def load_model(path, cfg: ExperimentConfig, strict: bool, role: str | None = None) -> VelocityNet:
    model, info = load_checkpoint(path, lineage_hash(cfg) if strict else None)
    if role is not None and info.role != role:
        raise ChunkflowError("model-role", f"{path} holds a {info.role}, expected a {role}")
    return model


# -- corpus --------------------------------------------------------------------


def gen_data(cfg: ExperimentConfig, out: Path) -> dict:
    records, labels = synthetic_corpus(cfg.world, cfg.corpus, cfg.seed, out / "clips")
    # locators are stored relative to the run directory so the corpus can move
    records = [replace(r, path=str(Path(r.path).relative_to(out))) for r in records]
    write_manifest(records, out / "manifest.ndjson")
    _write_json(out / "labels.json", labels)
    return {"clips": len(records), "corrupted": sum(v != "none" for v in labels.values())}


def filter_corpus(cfg: ExperimentConfig, out: Path, corpus_dir: Path) -> dict:
    corpus_dir = Path(corpus_dir)
    records = read_manifest(corpus_dir / "manifest.ndjson")
    records = [replace(r, path=str((corpus_dir / r.path).resolve())) for r in records]
    unique = dedup([standardize(r) for r in records])
    retained, report = filter_records(unique, cfg.thresholds)
    report["duplicates_removed"] = len(records) - len(unique)
    tuples = build_tuples(retained, cfg.teacher.chunk_frames)
    for tup in tuples:  # every locator must resolve before the tuple list is published
        resolve(tup.chunk)
    write_manifest(retained, out / "retained.ndjson")
    _write_json(out / "filter_report.json", report)
    with open(out / "tuples.ndjson", "w", encoding="utf-8") as fh:
        for tup in tuples:
            fh.write(json.dumps(tup.__dict__, sort_keys=True) + "\n")
    return {"retained": len(retained), "tuples": len(tuples)}


# -- training --------------------------------------------------------------------


def train(cfg: ExperimentConfig, out: Path) -> dict:
    result = train_teacher(cfg.teacher, cfg.world, cfg.codec, cfg.model_config(), out / "teacher_log.csv")
    save_checkpoint(result.model, out / "teacher.ckpt", cfg.teacher.steps, lineage_hash(cfg))
    summary = {"val_loss": result.val_loss, "baseline_loss": result.baseline_loss,
               "ratio": result.val_loss / result.baseline_loss, "fingerprint": result.model.fingerprint()}
    _write_json(out / "teacher_metrics.json", summary)
    return summary


def run_distill(cfg: ExperimentConfig, out: Path, teacher: VelocityNet) -> dict:
    result = distill(cfg.distill, teacher, cfg.world, cfg.codec, out / "distill_log.csv")
    h = lineage_hash(cfg)
    save_checkpoint(result.student, out / "student.ckpt", cfg.distill.steps, h)
    save_checkpoint(result.critic, out / "critic.ckpt", cfg.distill.steps, h)
    summary = {"mode": cfg.distill.mode, "teacher_fingerprint_before": result.teacher_fingerprint_before,
               "teacher_fingerprint_after": result.teacher_fingerprint_after,
               "student_fingerprint": result.student.fingerprint()}
    _write_json(out / "distill_summary.json", summary)
    return summary


# -- inference and evaluation ------------------------------------------------------


def run_rollout(cfg: ExperimentConfig, out: Path, student: VelocityNet, oracle_index: int = 0) -> dict:
    oracle = eval_oracle(cfg, oracle_index)
    rc = cfg.rollout
    clip = oracle.clip(rc.K * rc.T)
    result = rollout(student, clip.identity_image, clip.audio, rc, cfg.codec)
    save_rollout(result, out / "rollout", rc, {"oracle_index": oracle_index})
    return {"frames": int(result.frames.shape[0]), "provenance": result.provenance}


def evaluate(cfg: ExperimentConfig, out: Path, student: VelocityNet, teacher: VelocityNet | None = None) -> dict:
    rc = cfg.rollout
    reports = []
    for i in range(cfg.metrics.eval_oracles):
        oracle = eval_oracle(cfg, i)
        clip = oracle.clip(rc.K * rc.T)
        result = rollout(student, clip.identity_image, clip.audio, rc, cfg.codec)
        report = drift_curve(result.frames, oracle, rc.T, cfg.metrics.stride, cfg.metrics.window_chunks,
                             config={"oracle_index": i, "mode": cfg.distill.mode,
                                     "identity_scheme": rc.identity_scheme})
        d = out / f"oracle_{i}"
        d.mkdir(parents=True, exist_ok=True)
        report.to_json(d / "report.json")
        report.to_csv(d / "curves.csv", rc.T)
        reports.append(report)
    summary = summarize_reports(reports)
    if teacher is not None:
        summary["throughput_file"] = "throughput.json"
        _write_json(out / "throughput.json", throughput(cfg, student, teacher))
    _write_json(out / "eval_summary.json", summary)
    return summary


def summarize_reports(reports: list[MetricsReport]) -> dict:
    """Per-point means over evaluation oracles."""
    curve = np.mean([r.id_sim for r in reports], axis=0)
    return {
        "horizon_points": reports[0].horizon_points,
        "id_sim_curve": [float(v) for v in curve],
        "frechet_curve": [float(v) for v in np.mean([r.frechet for r in reports], axis=0)],
        "sync_curve": [float(v) for v in np.mean([r.sync_corr for r in reports], axis=0)],
        "id_sim_first": float(curve[0]),
        "id_sim_final": float(curve[-1]),
        "id_sim_mean": float(curve.mean()),
    }


def throughput(cfg: ExperimentConfig, student: VelocityNet, teacher: VelocityNet) -> dict:
    rc = replace(cfg.rollout, K=cfg.metrics.throughput_chunks)
    clip = eval_oracle(cfg, 0).clip(rc.K * rc.T)
    fps_s = measure_throughput(student, clip.identity_image, clip.audio, rc, rc.N, codec=cfg.codec)
    steps = cfg.metrics.teacher_eval_steps
    fps_t = measure_throughput(teacher, clip.identity_image, clip.audio, replace(rc, N=steps), steps, codec=cfg.codec)
    return {"student_steps": rc.N, "teacher_steps": steps, "fps_student": fps_s, "fps_teacher": fps_t,
            "speedup": fps_s / fps_t}


# -- ablation ----------------------------------------------------------------------

# (table, identity scheme, distillation mode); "without AKD" is the symmetric ground-truth topology
ABLATION_ROWS = (
    ("grid", "TRE", "asymmetric"),
    ("grid", "TRE", "symmetric_gt"),
    ("grid", "ETR", "asymmetric"),
    ("grid", "ETR", "symmetric_gt"),
    ("modes", "TRE", "asymmetric"),
    ("modes", "TRE", "symmetric_gt"),
    ("modes", "TRE", "symmetric_gen"),
)
ABLATION_COLUMNS = ("table", "identity_scheme", "mode", "akd", "id_sim_first", "id_sim_final", "id_sim_mean",
                    "frechet_final", "sync_final", "seeds")


def ablation_cell(cfg: ExperimentConfig, out: Path, seed: int, scheme: str, mode: str,
                  teachers: dict) -> dict:
    """Train (or reuse) the teacher for ``scheme`` and distill/evaluate one cell; cached on disk."""
    cell_cfg = _scheme_config(with_seed(cfg, seed), scheme)
    cell_cfg = replace(cell_cfg, distill=replace(cell_cfg.distill, mode=mode))
    seed_dir = out / f"seed_{seed}"
    summary_path = seed_dir / f"{scheme}_{mode}" / "eval" / "eval_summary.json"
    if summary_path.exists():
        return json.loads(summary_path.read_text())
    tdir = seed_dir / f"teacher_{scheme}"
    if scheme not in teachers:
        if not (tdir / "teacher.ckpt").exists():
            tdir.mkdir(parents=True, exist_ok=True)
            train(cell_cfg, tdir)
        teachers[scheme] = load_model(tdir / "teacher.ckpt", cell_cfg, strict=True, role="teacher")
    ddir = seed_dir / f"{scheme}_{mode}"
    ddir.mkdir(parents=True, exist_ok=True)
    run_distill(cell_cfg, ddir, teachers[scheme])
    student = load_model(ddir / "student.ckpt", cell_cfg, strict=True, role="student")
    return evaluate(cell_cfg, ddir / "eval", student)


def ablate(cfg: ExperimentConfig, out: Path) -> dict:
    per_seed = {}
    for seed in cfg.ablation.seeds:
        teachers: dict = {}
        per_seed[seed] = {}
        for _, scheme, mode in ABLATION_ROWS:
            if (scheme, mode) not in per_seed[seed]:
                per_seed[seed][(scheme, mode)] = ablation_cell(cfg, out, seed, scheme, mode, teachers)
    rows = []
    for table, scheme, mode in ABLATION_ROWS:
        cells = [per_seed[s][(scheme, mode)] for s in cfg.ablation.seeds]
        med = lambda key: statistics.median(c[key] for c in cells)  # noqa: E731
        rows.append({
            "table": table, "identity_scheme": scheme, "mode": mode, "akd": mode == "asymmetric",
            "id_sim_first": med("id_sim_first"), "id_sim_final": med("id_sim_final"),
            "id_sim_mean": med("id_sim_mean"), "frechet_final": statistics.median(c["frechet_curve"][-1] for c in cells),
            "sync_final": statistics.median(c["sync_curve"][-1] for c in cells),
            "seeds": len(cells),
        })
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    seeds_out = {str(s): {f"{a}_{b}": cells for (a, b), cells in d.items()} for s, d in per_seed.items()}
    _write_json(out / "ablation_seeds.json", seeds_out)
    return {"rows": len(rows), "table": "ablation.csv"}


def run_manifest(command: str, cfg: ExperimentConfig, out: Path, summary: dict, status: str = "ok") -> dict:
    artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "run.json")
    data = {"command": command, "seed": cfg.seed, "status": status, "versions": versions(),
            "lineage_hash": lineage_hash(cfg), "artifacts": artifacts, "summary": summary}
    _write_json(out / "run.json", data)
    return data
