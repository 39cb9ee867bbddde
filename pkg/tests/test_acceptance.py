"""One test per acceptance criterion; each records a PASS/FAIL line shown in the terminal summary.

Criteria 7-9 share one full-scale ablation (5 seeds, default config). It takes
over an hour on one core. Set CHUNKFLOW_ACCEPTANCE_DIR to keep its run directory
between sessions; cells already on disk are reused.
"""

import csv
import json
import math
import os
import random
import statistics
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from chunkflow import experiment as ex
from chunkflow.checkpoint import load_checkpoint
from chunkflow.codec import _haar_matrix, decode, decode_then_reencode_tail, encode, naive_tail_slice
from chunkflow.config import load_config
from chunkflow.corpus import ClipRecord, CorpusSpec, Thresholds, dedup, filter_records, synthetic_corpus
from chunkflow.distill import critic_loss, dmd_student_loss, dmd_surrogate, generate_student_chunk, regression_anchor
from chunkflow.rollout import RolloutConfig, measure_throughput
from chunkflow.teacher import facial_loss, temp_loss
from chunkflow.toy_world import WorldConfig, face_mask, generate_clip, generate_identity
from chunkflow.velocity import ModelConfig, VelocityNet, fm_loss, sample_path, sample_timesteps, score_from_velocity

from conftest import MICRO, finite_difference, flat_grad, micro_conds, micro_model, rel_error

SEEDS = (0, 1, 2, 3, 4)


def record(log, n, ok, detail):
    log.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# -- 1-6: exact / oracle checks -------------------------------------------------------


def test_criterion_1_codec_exactness(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    causal = True
    for i in range(100):
        T = 1 + 4 * int(rng.integers(0, 6))
        v = torch.from_numpy(rng.standard_normal((T, 16, 16)))
        lat = encode(v).data
        worst = max(worst, (decode(lat, T) - v).abs().max().item())
        if T > 1:
            w = v.clone()
            w[-1] += 1.0
            causal &= torch.equal(encode(w).data[:-1], lat[:-1])
        causal &= not lat[0, ..., 4:].any()
    ortho = max(np.abs(_haar_matrix(n) @ _haar_matrix(n).T - np.eye(n)).max() for n in (2, 4))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and causal and ortho <= 1e-12 and elapsed < 10
    record(acceptance_log, 1, ok, f"round-trip max err {worst:.2e} (<=1e-6), causal={causal}, "
                                  f"orthonormality err {ortho:.1e}, {elapsed:.1f}s (<10s)")


def test_criterion_2_decode_then_reencode(acceptance_log):
    t0 = time.perf_counter()
    world = WorldConfig()
    clip = generate_clip(world, generate_identity(world, 7), 17, 7)
    v = torch.from_numpy(clip.frames).double()
    lat = encode(v)
    good = decode_then_reencode_tail(lat, 17, 5).data
    exact = (good - encode(v[-5:]).data).abs().max().item()
    naive = (naive_tail_slice(lat, 5).data - encode(v[-5:]).data).abs().max().item()
    elapsed = time.perf_counter() - t0
    ok = exact <= 1e-6 and naive > 0.01 and elapsed < 5
    record(acceptance_log, 2, ok, f"re-encode err {exact:.2e} (<=1e-6), naive slice diff {naive:.3f} (>0.01), "
                                  f"{elapsed:.2f}s")


def test_criterion_3_score_conversion(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        x, t = float(rng.normal() * 2), float(rng.uniform(0.05, 0.95))
        denom = (1 - t) ** 2 + t**2
        v = (2 * t - 1) * x / denom  # optimal velocity for standard-normal data
        got = score_from_velocity(torch.tensor(v, dtype=torch.float64), torch.tensor(x, dtype=torch.float64), t)
        worst = max(worst, abs(got.item() + x / denom))
    elapsed = time.perf_counter() - t0
    record(acceptance_log, 3, worst <= 1e-4 and elapsed < 1, f"max err {worst:.2e} (<=1e-4), {elapsed:.3f}s")


def test_criterion_4_gradients(acceptance_log):
    t0 = time.perf_counter()
    n_params = sum(p.numel() for p in micro_model().parameters())
    errs = {}

    model, conds = micro_model(seed=2), micro_conds(seed=2)
    x1 = torch.randn(2, MICRO.latent_length, 1, 1, MICRO.channels, generator=torch.Generator().manual_seed(1),
                     dtype=torch.float64)
    sample = sample_path(x1, torch.Generator().manual_seed(0))
    params = list(model.parameters())
    fn = lambda: fm_loss(model, sample, conds)  # noqa: E731
    errs["fm_loss"] = rel_error(flat_grad(fn(), params), finite_difference(fn, params))

    teacher, critic, student = micro_model("teacher", 0), micro_model("critic", 7), micro_model("student", 2)
    conds_real, conds_fake = micro_conds(0), micro_conds(0, provenance="gen")
    z = torch.randn(x1.shape, generator=torch.Generator().manual_seed(9), dtype=torch.float64)
    g = torch.Generator().manual_seed(5)
    t = sample_timesteps(2, g, 0.02, 0.98, dtype=torch.float64)
    eps = torch.randn(z.shape, generator=g, dtype=torch.float64)
    params = list(student.parameters())
    loss, info = dmd_student_loss(teacher, critic, generate_student_chunk(student, z, conds_real, 4), conds_real,
                                  conds_fake, t=t, eps=eps)
    direction = info["w"].reshape(-1, 1, 1, 1, 1) * info["gap"]
    fn = lambda: (direction * generate_student_chunk(student, z, conds_real, 4)).flatten(1).sum(1).mean()  # noqa: E731
    errs["dmd"] = rel_error(flat_grad(loss, params), finite_difference(fn, params))

    params = list(critic.parameters())
    tc = torch.tensor([0.25, 0.7], dtype=torch.float64)
    fn = lambda: critic_loss(critic, z, conds_fake, t=tc, eps=eps)  # noqa: E731
    errs["critic"] = rel_error(flat_grad(fn(), params), finite_difference(fn, params))
    elapsed = time.perf_counter() - t0
    ok = n_params <= 200 and all(e <= 1e-3 for e in errs.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record(acceptance_log, 4, ok, f"relative errors {detail} (<=1e-3) on {n_params} params, {elapsed:.1f}s")


def gaussian_velocity(m, s):
    def field(x, t):
        tb = t.reshape(-1, 1)
        var = (1 - tb) ** 2 + tb**2 * s**2
        return (m + tb * s**2 * (x - tb * m) / var - x) / (1 - tb)
    return field


def test_criterion_5_dmd_oracle(acceptance_log):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    mu = torch.zeros((), dtype=torch.float64, requires_grad=True)
    log_s = torch.zeros((), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([mu, log_s], lr=0.02)
    steps = 2000
    for _ in range(steps):
        x = mu + log_s.exp() * torch.randn(8, 256, generator=g, dtype=torch.float64)
        t = sample_timesteps(8, g, 0.02, 0.98, dtype=torch.float64)
        eps = torch.randn(x.shape, generator=g, dtype=torch.float64)
        loss, _ = dmd_surrogate(x, gaussian_velocity(2.0, 1.0), gaussian_velocity(mu.detach(), log_s.detach().exp()),
                                t, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        samples = mu + log_s.exp() * torch.randn(100_000, generator=g, dtype=torch.float64)
    mean, var = samples.mean().item(), samples.var().item()
    elapsed = time.perf_counter() - t0
    ok = 1.8 <= mean <= 2.2 and 0.8 <= var <= 1.2 and elapsed < 300
    record(acceptance_log, 5, ok, f"student mean {mean:.3f} in [1.8,2.2], variance {var:.3f} in [0.8,1.2] "
                                  f"after {steps} steps, {elapsed:.1f}s")


def test_criterion_6_loss_units(acceptance_log):
    gt = torch.zeros(5)
    e = torch.zeros(5)
    e[0] = 1
    huber = [regression_anchor(gt, gt).item(), regression_anchor(0.6 * e, gt).item(),
             regression_anchor(3.0 * e, gt).item()]
    frames = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    temp = temp_loss(frames + 0.7, frames).item()
    mask = torch.from_numpy(face_mask(WorldConfig()))
    facial_out = facial_loss(frames + (~mask).double(), frames, mask).item()
    facial_in = facial_loss(frames + mask.double(), frames, mask).item()
    ok = (huber[0] == 0 and math.isclose(huber[1], 0.18, abs_tol=1e-7) and huber[2] == 2.5 and temp <= 1e-12
          and facial_out == 0 and facial_in == 1.0)
    record(acceptance_log, 6, ok, f"huber {huber} (0/0.18/2.5), temp offset {temp:.1e}, "
                                  f"facial outside {facial_out}, inside {facial_in}")


# -- 7-9: full-scale ablation ---------------------------------------------------------


@pytest.fixture(scope="session")
def ablation_run(tmp_path_factory):
    out = Path(os.environ.get("CHUNKFLOW_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance_ablation"))
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(None, [f"ablation.seeds={list(SEEDS)}"])
    t0 = time.perf_counter()
    ex.ablate(cfg, out)
    elapsed = time.perf_counter() - t0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    per_seed = json.loads((out / "ablation_seeds.json").read_text())
    return out, rows, per_seed, elapsed


def row(rows, table, scheme, mode):
    (r,) = [r for r in rows if (r["table"], r["identity_scheme"], r["mode"]) == (table, scheme, mode)]
    return r


def test_criterion_7_teacher(acceptance_log, ablation_run):
    out, _, per_seed, _ = ablation_run
    tdir = out / "seed_0" / "teacher_TRE"
    metrics = json.loads((tdir / "teacher_metrics.json").read_text())
    with open(tdir / "teacher_log.csv") as fh:
        train_minutes = sum(float(r["wall_ms"]) for r in csv.DictReader(fh)) / 60_000
    teacher, info = load_checkpoint(tdir / "teacher.ckpt")
    fingerprint = teacher.fingerprint()
    summaries = [json.loads((out / "seed_0" / f"TRE_{m}" / "distill_summary.json").read_text())
                 for m in ("asymmetric", "symmetric_gt", "symmetric_gen")]
    unchanged = all(s["teacher_fingerprint_before"] == s["teacher_fingerprint_after"] == fingerprint
                    for s in summaries)
    ok = metrics["ratio"] <= 0.5 and info.frozen and unchanged and train_minutes <= 60
    record(acceptance_log, 7, ok, f"val/baseline {metrics['val_loss']:.4f}/{metrics['baseline_loss']:.4f} = "
                                  f"{metrics['ratio']:.3f} (<=0.5), frozen={info.frozen}, bitwise unchanged across "
                                  f"3 distillations={unchanged}, training {train_minutes:.1f} min")


def test_criterion_8_ablation_directions(acceptance_log, ablation_run):
    _, rows, _, elapsed = ablation_run
    final = lambda table, scheme, mode: float(row(rows, table, scheme, mode)["id_sim_final"])  # noqa: E731
    asym, sym_gt, sym_gen = (final("modes", "TRE", m) for m in ("asymmetric", "symmetric_gt", "symmetric_gen"))
    tre, etr = final("grid", "TRE", "asymmetric"), final("grid", "ETR", "asymmetric")
    ok = asym > sym_gt and asym > sym_gen and tre >= etr and elapsed <= 4 * 3600
    record(acceptance_log, 8, ok, f"median final id_sim asym {asym:.5f} vs sym_gt {sym_gt:.5f} vs sym_gen "
                                  f"{sym_gen:.5f}; TRE {tre:.5f} >= ETR {etr:.5f}; grid {elapsed / 60:.0f} min")


def test_criterion_9_flatness(acceptance_log, ablation_run):
    _, _, per_seed, _ = ablation_run

    def drops(mode):
        return [per_seed[str(s)][f"TRE_{mode}"]["id_sim_first"] - per_seed[str(s)][f"TRE_{mode}"]["id_sim_final"]
                for s in SEEDS]

    asym = statistics.median(drops("asymmetric"))
    control = statistics.median(drops("symmetric_gt"))
    ok = abs(asym) <= 0.05 and control >= 2 * 0.05
    record(acceptance_log, 9, ok, f"asymmetric first-to-last change {asym:+.5f} (|.|<=0.05); symmetric_gt control "
                                  f"drop {control:+.5f} (>=0.10), medians over seeds {list(SEEDS)}")


# -- 10-12 -------------------------------------------------------------------------------


def test_criterion_10_throughput(acceptance_log):
    t0 = time.perf_counter()
    world = WorldConfig()
    clip = generate_clip(world, generate_identity(world, 1), 5 * 17, 1)
    cfg = RolloutConfig(K=5)
    student = VelocityNet(ModelConfig(), role="student", seed=0)
    teacher = VelocityNet(ModelConfig(), role="teacher", seed=0).freeze()
    fps_s = measure_throughput(student, clip.identity_image, clip.audio, cfg, 4)
    fps_t = measure_throughput(teacher, clip.identity_image, clip.audio, cfg, 50)
    elapsed = time.perf_counter() - t0
    ratio = fps_s / fps_t
    record(acceptance_log, 10, ratio >= 5 and elapsed < 300,
           f"student {fps_s:.0f} fps vs teacher {fps_t:.0f} fps = {ratio:.1f}x (>=5x), {elapsed:.1f}s")


def test_criterion_11_corpus(acceptance_log):
    t0 = time.perf_counter()
    rng = random.Random(11)
    records = [ClipRecord(f"r{i}", "s", rng.getrandbits(8), 25.0, 68, rng.random(), rng.random(),
                          rng.uniform(-1, 1), float(rng.randint(0, 8)), rng.random() < 0.1, rng.random() < 0.1)
               for i in range(1000)]
    gamma = Thresholds()

    def keep(r):
        return (r.face_visibility >= gamma.face and r.quality >= gamma.quality and r.sync_c >= gamma.sync_c
                and r.sync_d <= gamma.sync_d and not r.hand_occlusion_flag and not r.keypoint_missing_flag)

    oracle_ok = filter_records(records, gamma)[0] == [r for r in records if keep(r)]
    idempotent = dedup(dedup(records)) == dedup(records)
    corpus, labels = synthetic_corpus(WorldConfig(), CorpusSpec(n_clean=50, n_corrupt=50), seed=0)
    retained = {r.clip_id for r in filter_records(dedup(corpus), gamma)[0]}
    clean = {cid for cid, lab in labels.items() if lab == "none"}
    elapsed = time.perf_counter() - t0
    ok = oracle_ok and idempotent and retained == clean and elapsed < 120
    record(acceptance_log, 11, ok, f"oracle agreement on 1000 records={oracle_ok}, retained {len(retained)} = "
                                   f"clean {len(clean)}: {retained == clean}, dedup idempotent={idempotent}, "
                                   f"{elapsed:.1f}s")


TINY = ["teacher.steps=3", "teacher.batch=2", "teacher.val_clips=2", "distill.steps=2", "distill.batch=2",
        "rollout.K=4", "metrics.eval_oracles=1", "metrics.stride=2", "corpus.n_clean=4", "corpus.n_corrupt=3",
        "model.dim=16", "model.heads=2", "model.depth=1"]


def cli(*args):
    cmd = [sys.executable, "-m", "chunkflow", *args]
    for item in TINY:
        cmd += ["--set", item]
    done = subprocess.run(cmd, capture_output=True, text=True)
    assert done.returncode == 0, done.stderr
    return done


def strip_volatile(value):
    if isinstance(value, dict):
        return {k: strip_volatile(v) for k, v in value.items() if k not in ex.VOLATILE_KEYS}
    if isinstance(value, list):
        return [strip_volatile(v) for v in value]
    return value


def normalized(path: Path) -> bytes:
    """File bytes with only the declared wall-clock fields removed."""
    if path.suffix == ".json":
        return json.dumps(strip_volatile(json.loads(path.read_text())), sort_keys=True).encode()
    if path.suffix == ".csv":
        rows = list(csv.reader(open(path)))
        keep = [i for i, name in enumerate(rows[0]) if name not in ex.VOLATILE_COLUMNS]
        return "\n".join(",".join(r[i] for i in keep) for r in rows).encode()
    return path.read_bytes()


def test_criterion_12_determinism(acceptance_log, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    # each subcommand runs twice on identical inputs; the b-runs consume the a-run upstream artifacts
    runs = [
        ("gen-data", []),
        ("filter-corpus", ["--corpus", str(a / "gen-data")]),
        ("train-teacher", []),
        ("distill", ["--teacher", str(a / "train-teacher" / "teacher.ckpt")]),
        ("rollout", ["--student", str(a / "distill" / "student.ckpt")]),
        ("eval", ["--student", str(a / "distill" / "student.ckpt"), "--teacher",
                  str(a / "train-teacher" / "teacher.ckpt")]),
        ("ablate", []),
    ]
    mismatches = []
    compared = 0
    for name, extra in runs:
        for root in (a, b):
            cli(name, "--out", str(root / name), *extra)
        files_a = sorted(p.relative_to(a / name) for p in (a / name).rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b / name) for p in (b / name).rglob("*") if p.is_file())
        if files_a != files_b:
            mismatches.append(f"{name}: file lists differ")
            continue
        for rel in files_a:
            compared += 1
            if normalized(a / name / rel) != normalized(b / name / rel):
                mismatches.append(f"{name}/{rel}")
    record(acceptance_log, 12, not mismatches,
           f"{compared} artifact files over {len(runs)} subcommands, mismatches: {mismatches or 'none'}")
