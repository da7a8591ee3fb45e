import json

from histocl.harness.cli import cli_main


def test_missing_config_exits_1_naming_file(tmp_path, capsys):
    rc = cli_main(["run", "--config", str(tmp_path / "c.json")])
    assert rc == 1
    assert "c.json" in capsys.readouterr().err


def test_unknown_flag_exits_1(tmp_path, capsys):
    rc = cli_main(["synth", "--out", str(tmp_path / "d"), "--wat", "3"])
    assert rc == 1
    err = capsys.readouterr().err
    assert "--wat" in err and "synth" in err


def test_missing_subcommand_exits_1(capsys):
    assert cli_main([]) == 1


def test_synth_deterministic_folders(tmp_path, capsys):
    args = ["synth", "--classes", "3", "--per-class", "10", "--side", "16", "--seed", "7"]
    assert cli_main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli_main(args + ["--out", str(tmp_path / "b")]) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["checksums"] == mb["checksums"]
    assert ma["counts"] == {"class_00": 10, "class_01": 10, "class_02": 10}


def test_augment_writes_domain_folders(tmp_path, capsys):
    src = tmp_path / "src"
    assert cli_main(["synth", "--classes", "2", "--per-class", "10", "--side", "16",
                     "--seed", "3", "--out", str(src)]) == 0
    out = tmp_path / "aug"
    assert cli_main(["augment", "--in", str(src), "--out", str(out), "--seed", "5"]) == 0
    domains = sorted(d.name for d in (out / "class_00").iterdir() if d.is_dir())
    assert domains == [f"domain_{k}" for k in range(1, 6)]


def test_run_and_report_roundtrip(tmp_path, capsys):
    cfg = {
        "data": {"source": "synth", "classes": 4, "per_class": 12, "side": 16, "seed": 3},
        "scenario": {"kind": "class_il", "grouping": "22",
                     "split": {"fractions": [0.7, 0.15, 0.15]}},
        "model": {"input_side": 16, "conv_blocks": [[4, 3, True], [6, 3, False]]},
        "strategy": {"name": "finetune"},
        "train": {"epochs": 1, "lr": 0.05, "batch_size": 8, "seeds": [0]},
        "output": {"dir": str(tmp_path / "out")},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert cli_main(["run", "--config", str(cfg_path)]) == 0
    result = tmp_path / "out" / "result.json"
    assert result.exists()
    csv_before = (tmp_path / "out" / "acc_matrix_0.csv").read_bytes()

    rep = tmp_path / "rep"
    assert cli_main(["report", "--result", str(result), "--out", str(rep)]) == 0
    assert (rep / "acc_matrix_0.csv").read_bytes() == csv_before


def test_bad_config_key_exits_1(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"data": {"source": "synth"}, "oops": {}}))
    assert cli_main(["run", "--config", str(cfg_path)]) == 1
    assert "oops" in capsys.readouterr().err


def test_runtime_error_exits_2(tmp_path, capsys):
    # valid config, but the grouping cannot cover the classes: fails at run time
    cfg = {
        "data": {"source": "synth", "classes": 4, "per_class": 12, "side": 16, "seed": 3},
        "scenario": {"kind": "class_il", "grouping": "33",
                     "split": {"fractions": [0.7, 0.15, 0.15]}},
        "model": {"input_side": 16, "conv_blocks": [[4, 3, True], [6, 3, False]]},
        "strategy": {"name": "finetune"},
        "train": {"epochs": 1, "seeds": [0]},
        "output": {"dir": str(tmp_path / "out")},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert cli_main(["run", "--config", str(cfg_path)]) == 2
