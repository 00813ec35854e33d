import json

import pytest

from tsdkd.cli import main
from tsdkd.config import TrainConfig, parse_config
from tsdkd.plots import LOSS_COMPONENTS

TINY = ["digits_lo=2", "digits_hi=2", "n_train=60", "n_eval=6", "context=32", "max_len=16",
        "teacher_layers=1", "teacher_d_model=16", "teacher_heads=2", "student_d_model=8",
        "batch_size=4", "steps=3", "eval_every=2", "teacher_steps=2", "teacher_eval_every=2",
        "student_init_steps=1"]


def sets(extra=()):
    out = []
    for kv in [*TINY, *extra]:
        out += ["--set", kv]
    return out


def test_no_subcommand_is_usage(capsys):
    assert main([]) == 1
    assert "subcommand" in capsys.readouterr().err


def test_unknown_subcommand_is_usage(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_flag_is_usage():
    assert main(["gradcheck", "--trials", "many"]) == 1


def test_invalid_override_is_validation(tmp_path, capsys):
    assert main(["pretrain-teacher", "--out", str(tmp_path), "--set", "beta=1.5"]) == 2
    assert "beta" in capsys.readouterr().err
    assert main(["pretrain-teacher", "--out", str(tmp_path), "--set", "colour=red"]) == 2
    assert not any(tmp_path.iterdir())


def test_missing_files_are_io(tmp_path):
    assert main(["eval", str(tmp_path / "none.ckpt")]) == 4
    assert main(["distill", "--config", str(tmp_path / "none.cfg")]) == 4


def test_corrupt_checkpoint_is_validation(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["eval", str(bad)]) == 2


def test_distill_needs_teacher(tmp_path):
    assert main(["distill", "--out", str(tmp_path), *sets()]) == 2


def test_parse_config_examples(tmp_path):
    empty = tmp_path / "empty.cfg"
    empty.write_text("")
    cfg = parse_config(empty)
    assert (cfg.alpha, cfg.top_k, cfg.beta, cfg.coverage, cfg.em_fraction) == (0.1, 10, 0.9, 10.0, 0.1)
    assert parse_config(empty, ["alpha=0.2"]) == TrainConfig(alpha=0.2)


def test_config_round_trip_fixed_point(tmp_path):
    cfg = parse_config(None, ["objective=reverse_kl", "lr=1e-5", "adaptive=true"])
    a = tmp_path / "a.cfg"
    a.write_text(cfg.to_text())
    b = tmp_path / "b.cfg"
    b.write_text(parse_config(a).to_text())
    assert a.read_text() == b.read_text()


def test_pipeline(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TSDKD_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["pretrain-teacher", *sets()]) == 0
    teacher = tmp_path / "env" / "teacher.ckpt"
    assert teacher.is_file()
    assert json.loads((tmp_path / "env" / "teacher_record.json").read_text())["warning"]

    run = tmp_path / "run"
    assert main(["distill", "--teacher", str(teacher), "--out", str(run), *sets()]) == 0
    for name in ("metrics.jsonl", "student_final.ckpt", "student_best.ckpt", "config.txt", "record.json"):
        assert (run / name).is_file()
    assert parse_config(run / "config.txt") == parse_config(None, TINY)

    capsys.readouterr()
    assert main(["eval", str(run / "student_final.ckpt"), *sets()]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n"] == 6 and 0 <= report["exact_match"] <= 1

    assert main(["entropy-profile", str(run / "student_final.ckpt"), "-n", "8",
                 "--out", str(tmp_path / "prof"), *sets()]) == 0
    assert "within first 25%" in capsys.readouterr().out
    assert {p.name for p in (tmp_path / "prof").iterdir()} == {"entropy_profile.csv", "entropy_profile.svg"}

    assert main(["plot", "metrics", str(run / "metrics.jsonl")]) == 0
    names = {p.name for p in (run / "plots").iterdir()}
    assert names == {c + ext for c in LOSS_COMPONENTS for ext in (".csv", ".svg")}


def test_distill_cli_is_reproducible(tmp_path):
    assert main(["pretrain-teacher", "--out", str(tmp_path), *sets()]) == 0
    for d in ("a", "b"):
        assert main(["distill", "--teacher", str(tmp_path / "teacher.ckpt"),
                     "--out", str(tmp_path / d), *sets(["adaptive=true"])]) == 0
    for name in ("metrics.jsonl", "student_final.ckpt", "record.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_baseline_metrics_plot_only_total(tmp_path):
    assert main(["pretrain-teacher", "--out", str(tmp_path), *sets()]) == 0
    assert main(["distill", "--teacher", str(tmp_path / "teacher.ckpt"), "--out", str(tmp_path / "r"),
                 *sets(["objective=forward_kl"])]) == 0
    assert main(["plot", "metrics", str(tmp_path / "r" / "metrics.jsonl"), "--out", str(tmp_path / "p")]) == 0
    assert {p.name for p in (tmp_path / "p").iterdir()} == {"loss_total.csv", "loss_total.svg"}


def test_plot_errors(tmp_path, capsys):
    empty = tmp_path / "m.jsonl"
    empty.write_text("")
    assert main(["plot", "metrics", str(empty)]) == 2
    assert "no data" in capsys.readouterr().err
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"step": 0, "loss_total": 1.0}\n{"step": 1, oops\n')
    assert main(["plot", "metrics", str(bad)]) == 2
    assert ":2:" in capsys.readouterr().err
    csv = tmp_path / "p.csv"
    csv.write_text("position,mean_entropy,count\n0,1.0,3\n1,x,2\n")
    assert main(["plot", "profile", str(csv)]) == 2
    assert ":3:" in capsys.readouterr().err
    assert main(["plot", "metrics", str(tmp_path / "missing.jsonl")]) == 4


def test_plot_never_overwrites_input(tmp_path):
    src = tmp_path / "entropy_profile.csv"
    src.write_text("position,mean_entropy,count\n0,1.0,3\n1,0.5,2\n")
    before = src.read_bytes()
    assert main(["plot", "profile", str(src), "--out", str(tmp_path)]) == 2
    assert main(["plot", "profile", str(src)]) == 0
    assert src.read_bytes() == before
    twin = (tmp_path / "plots" / "entropy_profile.csv").read_text().splitlines()
    assert len(twin) - 1 == 2


def test_plot_is_deterministic(tmp_path):
    src = tmp_path / "in.csv"
    src.write_text("bin,teacher_mass,student_mass\n0,0.5,0.2\n1,0.5,0.8\n")
    assert main(["plot", "mode", str(src), "--out", str(tmp_path / "a")]) == 0
    assert main(["plot", "mode", str(src), "--out", str(tmp_path / "b")]) == 0
    for n in ("mode_demo.csv", "mode_demo.svg"):
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_mode_demo(tmp_path, capsys):
    assert main(["mode-demo", "--out", str(tmp_path), "--steps", "400"]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"mode_demo_beta0.001.csv", "mode_demo_beta0.999.svg", "mode_demo.json"} <= names
    summary = json.loads((tmp_path / "mode_demo.json").read_text())
    assert [s["beta"] for s in summary] == [0.001, 0.999]


def test_prop1_check_small(capsys):
    assert main(["prop1-check", "--trials", "20"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_small(capsys):
    assert main(["gradcheck", "--trials", "5"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "indirect" in out


def test_check_failures_exit_3(monkeypatch, capsys):
    import tsdkd.checks as C
    bad = C.GradcheckReport({"indirect": 1e-3, "direct": 1e-9}, 1, 1e-5, 0.0)
    monkeypatch.setattr(C, "gradcheck_suite", lambda *a, **k: bad)
    assert main(["gradcheck"]) == 3
    assert "FAIL" in capsys.readouterr().out
    rep = C.prop1_suite(3)
    rep.max_deviation = 1.0
    monkeypatch.setattr(C, "prop1_suite", lambda *a, **k: rep)
    assert main(["prop1-check"]) == 3


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
