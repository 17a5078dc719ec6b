import json

import pytest

from fddm.cli import EXIT_CONFIG, EXIT_GRADCHECK, EXIT_IO, EXIT_OK, main

SMALL = """\
generator:
  num_patients: 15
  seed: 2
train:
  epochs: 2
  teacher_arch: {hidden_dims: [8], feature_dim: 4}
  student_arch: {hidden_dims: [8], feature_dim: 4}
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "run.yaml").write_text(SMALL)
    return tmp_path


def run_pipeline(d, tag):
    cfg = str(d / "run.yaml")
    data = str(d / "data.jsonl")
    out = d / tag
    assert main(["synth", "--config", cfg, "--out", data]) == EXIT_OK
    assert main(["train-teacher", "--config", cfg, "--data", data, "--out", str(out)]) == EXIT_OK
    assert main(["train-student", "--config", cfg, "--data", data, "--out", str(out),
                 "--teacher", str(out / "teacher.ckpt.json")]) == EXIT_OK
    assert main(["eval", "--config", cfg, "--data", data, "--out", str(out),
                 "--checkpoint", str(out / "student.ckpt.json")]) == EXIT_OK
    return out


def test_pipeline_outputs(workdir, capsys):
    out = run_pipeline(workdir, "a")
    for name in ("teacher.ckpt.json", "student.ckpt.json", "student.log.jsonl", "report.json", "report.csv"):
        assert (out / name).exists(), name
    doc = json.loads((out / "report.json").read_text())
    assert doc["schema"] == "fddm-eval-report/1"
    text = capsys.readouterr().out
    assert "Fundus Images" in text and "OCT Images" in text and "Eyes" in text


def test_pipeline_byte_identical(workdir):
    a = run_pipeline(workdir, "a")
    b = run_pipeline(workdir, "b")
    for name in ("report.json", "report.csv", "student.ckpt.json", "student.log.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_synth_summary_counts(workdir, capsys):
    main(["synth", "--config", str(workdir / "run.yaml"), "--out", str(workdir / "d.jsonl")])
    lines = capsys.readouterr().out.splitlines()
    header = [c.strip() for c in lines[1].split("|")]
    assert header[1:] == ["Normal", "AMD", "DR", "FLD", "EXU", "RVO", "Total"]
    eyes = [c.strip() for c in lines[2].split("|")]
    assert eyes[0] == "Eyes" and eyes[-1] == "30"
    oct_row = [c.strip() for c in lines[4].split("|")]
    assert oct_row[-1] == "90"


def test_student_requires_teacher(workdir, capsys):
    main(["synth", "--config", str(workdir / "run.yaml"), "--out", str(workdir / "d.jsonl")])
    code = main(["train-student", "--data", str(workdir / "d.jsonl"), "--out", str(workdir)])
    assert code == EXIT_CONFIG
    assert "--teacher" in capsys.readouterr().err


def test_missing_data_is_io_error(workdir):
    assert main(["train-teacher", "--data", str(workdir / "nope.jsonl"), "--out", str(workdir)]) == EXIT_IO


def test_bad_config_exit_code(workdir):
    bad = workdir / "bad.yaml"
    bad.write_text("train: {alfa: 1}\n")
    assert main(["synth", "--config", str(bad), "--out", str(workdir / "d.jsonl")]) == EXIT_CONFIG


def test_bad_override_exit_code(workdir):
    main(["synth", "--config", str(workdir / "run.yaml"), "--out", str(workdir / "d.jsonl")])
    code = main(["train-teacher", "--data", str(workdir / "d.jsonl"), "--out", str(workdir), "--epochs", "0"])
    assert code == EXIT_CONFIG


def test_usage_error_exit_code():
    assert main(["no-such-command"]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG


def test_gradcheck_pass_and_negative_control(capsys):
    assert main(["gradcheck", "--instances", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("pass") == 4
    assert main(["gradcheck", "--instances", "2", "--corrupt", "L_CSA"]) == EXIT_GRADCHECK
    assert "L_CSA" in capsys.readouterr().err


def test_ablate_writes_table(workdir):
    main(["synth", "--config", str(workdir / "run.yaml"), "--out", str(workdir / "d.jsonl")])
    code = main(["ablate", "--config", str(workdir / "run.yaml"), "--data", str(workdir / "d.jsonl"),
                 "--out", str(workdir / "ab"), "--epochs", "1", "--seeds", "0", "1"])
    assert code == EXIT_OK
    rows = (workdir / "ab" / "ablation.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["baseline", "CSA-only", "CPM-only", "FDDM"]
