import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from subsetlift import _accel, data, evaluation, models
from subsetlift.cli import COMMANDS, COMMON, main

SMALL_TRAIN = ["--sizes-nn", "8", "--batch-size", "16", "--checkpoint-every", "1000"]

# sha256 over the sorted reconstruction files of the seeded run in
# test_reconstruction_golden_hash, recorded per kernel backend
GOLDEN_RECONSTRUCTION = {
    "numba": "38e564762ceb7146442a66564a4e3ce692d6f44f8f888bd69657e32f9d4a4997",
    "numpy": "30e4903eed2eb1d82913510443bf25c270267886b1a11e5736f7c957dd57a70a",
}


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = str(root / "ds.jsonl")
    assert main(["synth", "--frames", "40", "--k", "12", "--seed", "3", "--out", ds]) == 0
    run = str(root / "run")
    code = main(["train", "--dataset", ds, "--out-dir", run, "--steps", "6", "--seed", "3"] + SMALL_TRAIN)
    assert code == 0
    return root, ds, os.path.join(run, "checkpoint.slc")


def test_synth_is_byte_identical(tmp_path):
    a, b = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
    for out in (a, b):
        assert main(["synth", "--frames", "10", "--k", "12", "--seed", "1", "--out", out]) == 0
    assert _read(a) == _read(b)


def test_synth_summary_line(tmp_path, capsys):
    out = str(tmp_path / "d.jsonl")
    main(["synth", "--frames", "10", "--keypoints", "12", "--out", out])
    line = capsys.readouterr().out
    assert "frames=10" in line and "keypoints=12" in line and "occlusion_rate=" in line


def test_zero_angle_flags_rigid(tmp_path):
    out = str(tmp_path / "rigid.jsonl")
    assert main(["synth", "--frames", "5", "--k", "12", "--max-angle", "0", "--out", out]) == 0
    ds = data.read_dataset(out)
    assert ds.manifest.extra["rigid"] is True
    flexible = str(tmp_path / "flex.jsonl")
    main(["synth", "--frames", "5", "--k", "12", "--out", flexible])
    assert data.read_dataset(flexible).manifest.extra["rigid"] is False


def test_unknown_flag_is_config_error(capsys):
    assert main(["synth", "--no-such-flag", "1"]) == 2


def test_unknown_command_is_config_error():
    assert main(["fly"]) == 2


def test_help_lists_every_key_with_default(capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "400")
    for name, (table, _) in COMMANDS.items():
        assert main([name, "--help"]) == 0
        text = " ".join(capsys.readouterr().out.split())
        for key, _, default, _ in table + COMMON:
            assert "--" + key.replace("_", "-") in text
            assert f"(default: {default})" in text


def test_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"frames": 7, "k": 12, "seed": 5}))
    out = str(tmp_path / "c.jsonl")
    assert main(["synth", "--config", str(cfg), "--frames", "4", "--out", out]) == 0
    ds = data.read_dataset(out)
    assert len(ds) == 4  # flag beats file
    assert ds.manifest.extra["seed"] == 5  # file beats default
    assert ds.keypoints == 12


def test_config_unknown_key_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"frame_count": 7}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x.jsonl")]) == 2


def test_missing_dataset_is_io_error(tmp_path):
    code = main(["train", "--dataset", str(tmp_path / "absent.jsonl"), "--out-dir", str(tmp_path / "r")])
    assert code == 4


def test_malformed_dataset_is_io_error(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert main(["train", "--dataset", str(bad), "--out-dir", str(tmp_path / "r")]) == 4


def test_zero_step_checkpoint_equals_initialization(tmp_path):
    ds = str(tmp_path / "d.jsonl")
    main(["synth", "--frames", "20", "--k", "12", "--out", ds])
    run = str(tmp_path / "run")
    assert main(["train", "--dataset", ds, "--out-dir", run, "--steps", "0", "--seed", "9"] + SMALL_TRAIN) == 0
    model, step, _ = models.load_model(os.path.join(run, "checkpoint.slc"))
    assert step == 0
    fresh = models.build_model(models.ModelConfig("mixer", 8, 8, 12, 9))
    for name, arr in models.model_arrays(fresh).items():
        assert np.array_equal(models.model_arrays(model)[name], arr), name


def test_resume_matches_straight_run(tmp_path):
    ds = str(tmp_path / "d.jsonl")
    main(["synth", "--frames", "40", "--k", "12", "--out", ds])
    straight = str(tmp_path / "straight")
    base = ["train", "--dataset", ds, "--seed", "2", "--depth", "2"] + SMALL_TRAIN
    assert main(base + ["--out-dir", straight, "--steps", "10"]) == 0
    half = str(tmp_path / "half")
    assert main(base + ["--out-dir", half, "--steps", "5"]) == 0
    resumed = str(tmp_path / "resumed")
    assert main(base + ["--out-dir", resumed, "--steps", "10", "--resume", os.path.join(half, "checkpoint.slc")]) == 0
    assert _read(os.path.join(straight, "checkpoint.slc")) == _read(os.path.join(resumed, "checkpoint.slc"))


def test_identical_train_invocations_are_bit_identical(tmp_path):
    ds = str(tmp_path / "d.jsonl")
    main(["synth", "--frames", "30", "--k", "12", "--out", ds])
    outs = []
    for name in ("a", "b"):
        run = str(tmp_path / name)
        main(["train", "--dataset", ds, "--out-dir", run, "--steps", "3", "--depth", "2"] + SMALL_TRAIN)
        outs.append(_read(os.path.join(run, "checkpoint.slc")))
    assert outs[0] == outs[1]


def test_ground_truth_as_prediction_scores_zero(tmp_path):
    ds = str(tmp_path / "d.jsonl")
    main(["synth", "--frames", "12", "--k", "12", "--out", ds])
    report = str(tmp_path / "r.txt")
    assert main(["eval", "--dataset", ds, "--predictions", ds, "--out", report]) == 0
    vals = evaluation.read_report(report)
    assert vals["mpjpe"] == 0.0
    assert vals["mpjpe_depth_offset"] == 0.0
    assert vals["mpjpe_sequence_scale"] == 0.0


def test_eval_twice_identical_and_offset_not_worse(small_run):
    root, ds, ckpt = small_run
    reports = []
    for name in ("r1.txt", "r2.txt"):
        path = str(root / name)
        assert main(["eval", "--checkpoint", ckpt, "--dataset", ds, "--out", path]) == 0
        reports.append(_read(path))
    assert reports[0] == reports[1]
    vals = evaluation.read_report(str(root / "r1.txt"))
    assert vals["mpjpe_depth_offset"] <= vals["mpjpe"]


def test_eval_keypoint_mismatch_is_config_error(small_run, tmp_path):
    _, _, ckpt = small_run
    other = str(tmp_path / "k16.jsonl")
    main(["synth", "--frames", "5", "--k", "16", "--out", other])
    assert main(["eval", "--checkpoint", ckpt, "--dataset", other, "--out", str(tmp_path / "r.txt")]) == 2


def test_reconstruct_files_and_visible_xy(small_run, tmp_path):
    _, ds_path, ckpt = small_run
    ds = data.read_dataset(ds_path)
    out = str(tmp_path / "rec")
    assert main(["reconstruct", "--checkpoint", ckpt, "--dataset", ds_path, "--out-dir", out, "--format", "csv"]) == 0
    files = sorted(os.listdir(out))
    assert len(files) == len(ds)
    for i, name in enumerate(files):
        pts = evaluation.read_pointcloud(os.path.join(out, name))
        vis = ds.v[i] == 1
        assert np.array_equal(pts[vis, :2], ds.w[i][vis])


def test_reconstruct_unwritable_dir_is_io_error(small_run, tmp_path):
    _, ds, ckpt = small_run
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["reconstruct", "--checkpoint", ckpt, "--dataset", ds, "--out-dir", str(blocker / "sub")]) == 4


def test_reconstruction_golden_hash(small_run, tmp_path):
    _, ds, ckpt = small_run
    out = str(tmp_path / "rec")
    main(["reconstruct", "--checkpoint", ckpt, "--dataset", ds, "--out-dir", out])
    digest = hashlib.sha256()
    for name in sorted(os.listdir(out)):
        digest.update(name.encode())
        digest.update(_read(os.path.join(out, name)))
    expected = GOLDEN_RECONSTRUCTION[_accel.backend_name()]
    assert digest.hexdigest() == expected


def test_export_ground_truth(tmp_path):
    ds_path = str(tmp_path / "d.jsonl")
    main(["synth", "--frames", "4", "--k", "12", "--out", ds_path])
    out = str(tmp_path / "s.csv")
    assert main(["export", "--dataset", ds_path, "--index", "2", "--out", out]) == 0
    assert np.array_equal(evaluation.read_pointcloud(out), data.read_dataset(ds_path).gt[2])


def test_export_index_out_of_range(tmp_path):
    ds_path = str(tmp_path / "d.jsonl")
    main(["synth", "--frames", "4", "--k", "12", "--out", ds_path])
    assert main(["export", "--dataset", ds_path, "--index", "4", "--out", str(tmp_path / "s.ply")]) == 2


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    from subsetlift import training

    ds = str(tmp_path / "d.jsonl")
    main(["synth", "--frames", "20", "--k", "12", "--out", ds])

    def broken(*args, **kwargs):
        raise training.NumericFailureError("forced")

    monkeypatch.setattr(training, "training_losses", broken)
    code = main(["train", "--dataset", ds, "--out-dir", str(tmp_path / "r"), "--steps", "2"] + SMALL_TRAIN)
    assert code == 3


def _run_module(args, env_extra):
    env = dict(os.environ, **env_extra)
    return subprocess.run([sys.executable, "-m", "subsetlift.cli"] + args, env=env, capture_output=True, text=True)


@pytest.mark.parametrize("env", [{"SUBSETLIFT_DISABLE_NUMBA": "1"}, {"SUBSETLIFT_DEBUG": "1"}])
def test_subprocess_modes(tmp_path, env):
    ds = str(tmp_path / "d.jsonl")
    assert _run_module(["synth", "--frames", "20", "--k", "12", "--out", ds], env).returncode == 0
    proc = _run_module(["train", "--dataset", ds, "--out-dir", str(tmp_path / "r"), "--steps", "2", "--depth", "2"] + SMALL_TRAIN, env)
    assert proc.returncode == 0, proc.stderr
    assert os.path.exists(tmp_path / "r" / "checkpoint.slc")
