import csv
import json

import pytest
import torch

from chunkflow.checkpoint import load_checkpoint, read_header, save_checkpoint
from chunkflow.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from chunkflow.config import (
    ExperimentConfig,
    apply_overrides,
    from_dict,
    lineage_hash,
    load_config,
    to_dict,
    validate,
)
from chunkflow.errors import ChunkflowError
from chunkflow.velocity import ModelConfig, VelocityNet

TINY = [
    "teacher.steps=2", "teacher.batch=2", "teacher.val_clips=2", "distill.steps=1", "distill.batch=2",
    "rollout.K=4", "metrics.eval_oracles=1", "metrics.stride=2", "corpus.n_clean=3", "corpus.n_corrupt=2",
    "model.dim=8", "model.heads=1", "model.depth=1", "model.time_freqs=8",
]


def tiny_args(*extra):
    args = []
    for item in TINY:
        args += ["--set", item]
    return args + list(extra)


SMALL = ModelConfig(latent_length=5, latent_hw=(8, 8), channels=16, context_length=2, audio_dim=4,
                    dim=8, heads=1, depth=1, ffn_mult=1, time_freqs=8, zero_head=False)


def test_default_config_validates_and_round_trips():
    cfg = validate(ExperimentConfig())
    assert from_dict(ExperimentConfig, to_dict(cfg)) == cfg


def test_overrides_are_typed():
    cfg = load_config(None, ["distill.lambda_reg=1", "distill.mode=symmetric_gen", "ablation.seeds=[1,2]"])
    assert cfg.distill.lambda_reg == 1.0 and isinstance(cfg.distill.lambda_reg, float)
    assert cfg.distill.mode == "symmetric_gen" and cfg.ablation.seeds == (1, 2)


def test_unknown_key_rejected():
    with pytest.raises(ChunkflowError):
        load_config(None, ["distill.nonsense=1"])
    with pytest.raises(ChunkflowError):
        apply_overrides({}, ["no_equals_sign"])


@pytest.mark.parametrize("override", ["teacher.chunk_frames=16", "teacher.tau=4", "teacher.tau=21",
                                      "metrics.stride=1", "rollout.K=1"])
def test_invalid_configs(override):
    with pytest.raises(ChunkflowError) as err:
        load_config(None, [override])
    assert err.value.code == "config-invalid"


def test_seed_propagates():
    cfg = load_config(None, [], seed=7)
    assert cfg.seed == cfg.teacher.seed == cfg.distill.seed == cfg.rollout.seed == 7


def test_lineage_hash_ignores_unrelated_sections():
    a = load_config(None, [])
    assert lineage_hash(a) == lineage_hash(load_config(None, ["distill.steps=5"]))
    assert lineage_hash(a) != lineage_hash(load_config(None, ["teacher.steps=5"]))


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = VelocityNet(SMALL, role="student", seed=3)
    save_checkpoint(model, tmp_path / "a.ckpt", 12, "abc")
    back, info = load_checkpoint(tmp_path / "a.ckpt")
    assert (info.role, info.step, info.config_hash, info.frozen) == ("student", 12, "abc", False)
    assert all(torch.equal(p, q) for p, q in zip(model.state_dict().values(), back.state_dict().values()))
    save_checkpoint(back, tmp_path / "b.ckpt", 12, "abc")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_frozen_teacher_loads_frozen(tmp_path):
    save_checkpoint(VelocityNet(SMALL, role="teacher").freeze(), tmp_path / "t.ckpt", 1, "h")
    model, info = load_checkpoint(tmp_path / "t.ckpt")
    assert info.frozen and model.frozen
    with pytest.raises(ChunkflowError) as err:
        model.trainable_parameters()
    assert err.value.code == "frozen-params"


def test_truncated_checkpoint_names_first_bad_tensor(tmp_path):
    path = save_checkpoint(VelocityNet(SMALL, role="student"), tmp_path / "s.ckpt", 0, "h")
    raw = path.read_bytes()
    info, payload_start = read_header(raw)
    name, _, offset, nbytes = max(info.tensors, key=lambda t: t[2])
    path.write_bytes(raw[:payload_start + offset + nbytes // 2])  # ends inside the last stored tensor
    with pytest.raises(ChunkflowError) as err:
        load_checkpoint(path)
    assert err.value.code == "checkpoint-corrupt" and name in str(err.value)


def test_config_hash_mismatch_is_refused(tmp_path):
    path = save_checkpoint(VelocityNet(SMALL, role="student"), tmp_path / "s.ckpt", 0, "aaa")
    load_checkpoint(path)
    with pytest.raises(ChunkflowError) as err:
        load_checkpoint(path, expected_hash="bbb")
    assert err.value.code == "checkpoint-config-mismatch"


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert main(["train-teacher", "--out", str(tmp_path / "x"), "--set", "teacher.tau=4"]) == EXIT_CONFIG
    assert "tau" in capsys.readouterr().err


def test_cli_failure_leaves_marker(tmp_path):
    out = tmp_path / "d"
    code = main(["distill", "--out", str(out), "--teacher", str(tmp_path / "missing.ckpt")] + tiny_args())
    assert code == EXIT_RUNTIME
    assert (out / "FAILED").exists()
    assert json.loads((out / "run.json").read_text())["status"] == "failed"
    assert (out / "config.json").exists()


def test_cli_pipeline(tmp_path):
    run = lambda *a: main(list(a) + tiny_args())  # noqa: E731
    assert run("gen-data", "--out", str(tmp_path / "data")) == EXIT_OK
    assert run("filter-corpus", "--out", str(tmp_path / "filt"), "--corpus", str(tmp_path / "data")) == EXIT_OK
    report = json.loads((tmp_path / "filt" / "filter_report.json").read_text())
    assert report["input"] == 5 and report["retained"] == 3
    assert run("train-teacher", "--out", str(tmp_path / "t")) == EXIT_OK
    teacher = str(tmp_path / "t" / "teacher.ckpt")
    assert run("distill", "--out", str(tmp_path / "s"), "--teacher", teacher, "--mode", "symmetric_gen") == EXIT_OK
    assert json.loads((tmp_path / "s" / "distill_summary.json").read_text())["mode"] == "symmetric_gen"
    student = str(tmp_path / "s" / "student.ckpt")
    assert run("rollout", "--out", str(tmp_path / "r1"), "--student", student, "--strict") == EXIT_OK
    assert run("rollout", "--out", str(tmp_path / "r2"), "--student", student) == EXIT_OK
    assert (tmp_path / "r1" / "rollout" / "frames.f32").read_bytes() == \
        (tmp_path / "r2" / "rollout" / "frames.f32").read_bytes()
    # a student handed in as the teacher is refused
    assert run("distill", "--out", str(tmp_path / "bad"), "--teacher", student) == EXIT_RUNTIME
    assert run("eval", "--out", str(tmp_path / "e"), "--student", student, "--teacher", teacher) == EXIT_OK
    summary = json.loads((tmp_path / "e" / "eval_summary.json").read_text())
    assert len(summary["id_sim_curve"]) == len(summary["horizon_points"]) == 2
    assert json.loads((tmp_path / "e" / "throughput.json").read_text())["speedup"] > 0
    manifest = json.loads((tmp_path / "e" / "run.json").read_text())
    assert manifest["status"] == "ok" and "eval_summary.json" in manifest["artifacts"]
    assert set(manifest["versions"]) >= {"chunkflow", "torch", "numpy"}


def test_strict_mode_rejects_other_lineage(tmp_path):
    assert main(["train-teacher", "--out", str(tmp_path / "t")] + tiny_args()) == EXIT_OK
    teacher = str(tmp_path / "t" / "teacher.ckpt")
    code = main(["distill", "--out", str(tmp_path / "s"), "--teacher", teacher, "--strict"]
                + tiny_args("--set", "world.motion_amp=0.3"))
    assert code == EXIT_RUNTIME
    assert "checkpoint-config-mismatch" in (tmp_path / "s" / "FAILED").read_text()


def test_ablate_emits_seven_rows(tmp_path):
    assert main(["ablate", "--out", str(tmp_path / "a")] + tiny_args()) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "a" / "ablation.csv")))
    assert len(rows) == 7
    assert [(r["table"], r["identity_scheme"], r["mode"]) for r in rows][:4] == [
        ("grid", "TRE", "asymmetric"), ("grid", "TRE", "symmetric_gt"),
        ("grid", "ETR", "asymmetric"), ("grid", "ETR", "symmetric_gt")]
