"""Config parsing and the command-line workflows end to end."""

import numpy as np
import pytest

from fsce.config import (DEFAULTS, canonical_lines, parse_config,
                         student_config, teacher_config, train_settings)
from fsce.data import read_dataset
from fsce.errors import ConfigError
from fsce.models import build_model, count_flops, count_params, get_preset


# ------------------------------------------------------------------- config

def test_empty_config_is_all_defaults():
    assert parse_config("") == DEFAULTS


def test_overrides_comments_and_blanks():
    text = """
    # a comment line
    train.epochs = 5
    kd.T = 2.0          # trailing comment
    kd.enabled = false
    model.kernel_sizes = 3, 5
    seed = 9
    """
    v = parse_config(text)
    assert v["train.epochs"] == 5
    assert v["kd.T"] == 2.0
    assert v["kd.enabled"] is False
    assert v["model.kernel_sizes"] == (3, 5)
    assert v["seed"] == 9
    assert v["train.batch_size"] == DEFAULTS["train.batch_size"]


@pytest.mark.parametrize("text,fragment", [
    ("x = 1\nnot.a.key = 2", "line 2"),
    ("seed = 1\nseed = 2", "line 2"),
    ("train.epochs = soon", "integer"),
    ("kd.enabled = yes", "true or false"),
    ("model.kernel_sizes = 3,five", "comma-separated"),
    ("just some words", "key = value"),
])
def test_parse_errors_carry_context(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_unknown_key_is_first_error():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("no.such.key = 1")


def test_canonical_lines_round_trip():
    v = parse_config("train.epochs = 7\nkd.alpha = 0.25\nkd.enabled = false\n"
                     "model.kernel_sizes = 3,7")
    again = parse_config("\n".join(canonical_lines(v)))
    assert again == v


def test_student_config_wiring():
    v = parse_config("model.preset = student-L\nmodel.insertion = s2\n"
                     "model.branches = spatial\nmodel.num_classes = 3\n"
                     "model.kernel_sizes = 3,5\nmodel.cbam_reduction = 4\n"
                     "model.cbam_legacy_order = true\nmodel.wt_kernel = 5")
    cfg = student_config(v)
    assert cfg.block == "residual" and cfg.insertion == "s2"
    assert cfg.num_classes == 3
    assert cfg.dsaf.kernel_sizes == (3, 5)
    assert cfg.dsaf.branches == "spatial"
    assert cfg.dsaf.legacy_cbam is True
    assert cfg.dsaf.cbam_reduction == 4
    assert cfg.dsaf.wt_kernel == 5


def test_teacher_config_wiring():
    v = parse_config("model.num_classes = 3")
    t = teacher_config(v)
    assert t is not None
    assert t.insertion == "none" and t.num_classes == 3
    assert t.stages == get_preset("teacher-S").stages
    v = parse_config("kd.enabled = false")
    assert teacher_config(v) is None


def test_train_settings_wiring_and_validation():
    s = train_settings(parse_config("kd.T = 4.5\nkd.alpha = 0.25\n"
                                    "aug.student.blur_sigma_max = 0.5"))
    assert s.temperature == 4.5 and s.alpha == 0.25
    assert s.student_aug.blur_sigma_max == 0.5
    with pytest.raises(ConfigError):
        train_settings(parse_config("kd.alpha = 1.5"))
    with pytest.raises(ConfigError):
        train_settings(parse_config("aug.student.crop_min = 0.0"))


# ------------------------------------------------------------ cli error paths

def test_cli_error_paths():
    from fsce.cli import main
    assert main([]) == 1                                # no command
    assert main(["train"]) == 1                         # missing required flags
    assert main(["gen-data", "--out", "x", "--per-class", "0"]) == 1
    assert main(["train", "--data-train", "/nonexistent/a.sds",
                 "--data-test", "/nonexistent/b.sds"]) == 1
    assert main(["count", "--preset", "student-XXL"]) == 1
    assert main(["gradcheck", "--cases", "bogus_case"]) == 1


# -------------------------------------------------------------- cli workflows

@pytest.fixture(scope="module")
def workdir(tmp_path_factory, cli):
    root = tmp_path_factory.mktemp("cliwork")
    r = cli("gen-data", "--out", root / "train.sds", "--part", "train",
            "--per-class", 4, "--size", 16, "--seed", 0)
    assert r.returncode == 0, r.stderr
    r = cli("gen-data", "--out", root / "test.sds", "--part", "test",
            "--per-class", 2, "--size", 16, "--seed", 0)
    assert r.returncode == 0, r.stderr
    (root / "run.cfg").write_text(
        "train.epochs = 2\ntrain.batch_size = 8\nkd.enabled = false\n")
    r = cli("train", "--config", root / "run.cfg",
            "--data-train", root / "train.sds", "--data-test", root / "test.sds",
            "--log", root / "metrics.csv", "--ckpt-out", root / "model.ckpt")
    assert r.returncode == 0, r.stderr
    return root, r.stdout


def test_gen_data_matches_the_library(workdir):
    from fsce.data import generate_split
    root, _ = workdir
    images, labels, k = read_dataset(root / "train.sds")
    ref_i, ref_l = generate_split(0, "train", per_class=4, num_classes=4, size=16)
    assert k == 4
    assert np.array_equal(images, ref_i) and np.array_equal(labels, ref_l)


def test_train_outputs(workdir):
    root, stdout = workdir
    assert "config:" in stdout
    assert "final train accuracy" in stdout
    assert "final test accuracy" in stdout
    lines = (root / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,")
    assert len(lines) == 3                       # header + two epochs
    assert (root / "model.ckpt").stat().st_size > 0


def test_eval_reports_accuracy_and_confusion(workdir, cli):
    root, _ = workdir
    r = cli("eval", "--ckpt", root / "model.ckpt", "--data", root / "test.sds",
            "--silhouette")
    assert r.returncode == 0, r.stderr
    assert "accuracy" in r.stdout
    assert "confusion" in r.stdout
    assert "silhouette" in r.stdout
    assert "bar" in r.stdout and "cross" in r.stdout


def test_eval_rejects_class_mismatch(workdir, cli, tmp_path):
    root, _ = workdir
    r = cli("gen-data", "--out", tmp_path / "tri.sds", "--per-class", 2,
            "--classes", 3, "--size", 16)
    assert r.returncode == 0, r.stderr
    r = cli("eval", "--ckpt", root / "model.ckpt", "--data", tmp_path / "tri.sds")
    assert r.returncode == 1
    assert "classes" in r.stderr


def test_gradcam_exports_pgm_pairs(workdir, cli, tmp_path):
    root, _ = workdir
    out = tmp_path / "maps"
    r = cli("gradcam", "--ckpt", root / "model.ckpt", "--data", root / "test.sds",
            "--out", out, "--count", 2)
    assert r.returncode == 0, r.stderr
    files = sorted(p.name for p in out.iterdir())
    assert files[0].startswith("cam_000_") and files[1].startswith("cam_001_")
    assert "input_000.pgm" in files and "input_001.pgm" in files
    for p in out.iterdir():
        assert p.read_bytes().startswith(b"P5\n16 16\n255\n")


def test_count_matches_the_library(cli):
    r = cli("count", "--preset", "student-M", "--size", 32)
    assert r.returncode == 0, r.stderr
    lines = r.stdout.splitlines()
    assert any("1 multiply-add = 2 FLOPs" in l for l in lines)
    rows = {l.split()[0]: l.split() for l in lines if l.startswith("student-M")}
    model = build_model(get_preset("student-M"), 0)
    assert int(rows["student-M"][1]) == count_params(model)
    assert int(rows["student-M"][2]) == count_flops(model, (1, 32, 32))
    assert int(rows["student-M+dsaf@s1"][1]) > count_params(model)


def test_trace_record_and_replay_agree(workdir, cli, tmp_path):
    root, _ = workdir
    cfg = tmp_path / "kd.cfg"
    cfg.write_text("train.epochs = 2\ntrain.batch_size = 8\n")
    common = ("--config", cfg, "--data-train", root / "train.sds",
              "--data-test", root / "test.sds")
    r = cli("train", *common, "--log", tmp_path / "live.csv",
            "--record-trace", tmp_path / "t.npz")
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "t.npz").exists()
    r2 = cli("train", *common, "--log", tmp_path / "replay.csv",
             "--trace", tmp_path / "t.npz")
    assert r2.returncode == 0, r2.stderr
    assert (tmp_path / "live.csv").read_bytes() == \
        (tmp_path / "replay.csv").read_bytes()
    final = [l for l in r.stdout.splitlines() if l.startswith("final test")]
    final2 = [l for l in r2.stdout.splitlines() if l.startswith("final test")]
    assert final == final2


def test_trace_replay_rejects_other_settings(workdir, cli, tmp_path):
    root, _ = workdir
    cfg = tmp_path / "kd.cfg"
    cfg.write_text("train.epochs = 2\ntrain.batch_size = 8\n")
    r = cli("train", "--config", cfg, "--data-train", root / "train.sds",
            "--data-test", root / "test.sds", "--record-trace", tmp_path / "t.npz")
    assert r.returncode == 0, r.stderr
    other = tmp_path / "other.cfg"
    other.write_text("train.epochs = 2\ntrain.batch_size = 8\n"
                     "train.lr_teacher = 1e-3\n")
    r = cli("train", "--config", other, "--data-train", root / "train.sds",
            "--data-test", root / "test.sds", "--trace", tmp_path / "t.npz")
    assert r.returncode == 1
    assert "trace" in r.stderr


def test_config_file_error_reports_line(cli, tmp_path, workdir):
    root, _ = workdir
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.epochs = 2\nwhatever = 3\n")
    r = cli("train", "--config", bad, "--data-train", root / "train.sds",
            "--data-test", root / "test.sds")
    assert r.returncode == 1
    assert "line 2" in r.stderr
