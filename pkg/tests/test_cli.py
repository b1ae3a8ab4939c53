import json

import pytest

from ppctsim import cli, csvio


@pytest.fixture
def workdir(tmp_path):
    cfg = {
        "gen": {"n_users": 400, "dim_x": 6},
        "protocol": {"suppression_k": 2},
        "train": {"max_epochs": 4},
        "settings": ["NonPPCT", "AndroidOnly", "OptInOnly", "PostRankingSignals"],
        "rates": [0.0, 0.5],
        "n_seeds": 2,
        "output_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return tmp_path, str(path)


def _lines(path):
    return path.read_text().count("\n")


def test_generate_manifest_and_determinism(workdir, capsys):
    tmp, cfg = workdir
    assert cli.main(["generate", "--config", cfg]) == 0
    out = tmp / "out"
    m = csvio.read_manifest(out / "logs.manifest")
    assert int(m["rows"]) == _lines(out / "logs.csv") - 1
    assert len(m["config_sha256"]) == 64 and m["seed"] == "0"
    first = (out / "logs.csv").read_bytes()
    assert cli.main(["generate", "--config", cfg]) == 2  # no silent overwrite
    assert "--force" in capsys.readouterr().err
    assert cli.main(["generate", "--config", cfg, "--force"]) == 0
    assert (out / "logs.csv").read_bytes() == first
    assert cli.main(["generate", "--config", cfg, "--force", "--seed", "9"]) == 0
    assert (out / "logs.csv").read_bytes() != first


def test_malformed_field_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"gen": {"ios_fraction": 3}}')
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "gen.ios_fraction" in capsys.readouterr().err


def test_unreadable_config_exit_3(tmp_path, capsys):
    assert cli.main(["generate", "--config", str(tmp_path / "missing.json")]) == 3
    assert "missing.json" in capsys.readouterr().err


def test_simulate_outputs(workdir):
    tmp, cfg = workdir
    out = tmp / "out"
    assert cli.main(["simulate", "--config", cfg]) == 3  # logs missing
    cli.main(["generate", "--config", cfg])
    assert cli.main(["simulate", "--config", cfg, "--k", "0", "--bits", "5"]) == 0
    groups = csvio.read_csv_dicts(out / "groups.csv")
    callbacks = csvio.read_csv_dicts(out / "callbacks.csv")
    logs = csvio.read_csv_dicts(out / "logs.csv")
    assert not any(g["suppressed"] == "1" for g in groups)
    assert max(int(c["token"]) for c in callbacks) <= 31
    # single all-covering window (sweep default): conversions are conserved
    assert sum(int(g["conversions"]) for g in groups) == sum(int(r["z"]) for r in logs)
    assert len(callbacks) == sum(int(r["z"]) for r in logs)
    m = csvio.read_manifest(out / "simulate.manifest")
    assert m["protocol.suppression_k"] == "0" and int(m["groups"]) == len(groups)


def test_simulate_flag_validation(workdir, capsys):
    tmp, cfg = workdir
    cli.main(["generate", "--config", cfg])
    assert cli.main(["simulate", "--config", cfg, "--delay-min", "50", "--delay-max", "10"]) == 2
    assert "delay_max_h" in capsys.readouterr().err


def test_train_then_evaluate(workdir):
    tmp, cfg = workdir
    out = tmp / "out"
    cli.main(["generate", "--config", cfg])
    assert cli.main(["evaluate", "--config", cfg]) == 3  # no checkpoint yet
    assert cli.main(["train", "--config", cfg, "--setting", "PostRankingSignals", "--rate", "0.2"]) == 0
    for name in ("model.ckpt", "trace.csv", "soft_labels.csv", "imputer.txt", "train.manifest"):
        assert (out / name).exists()
    trace = csvio.read_csv_dicts(out / "trace.csv")
    assert list(trace[0]) == ["epoch", "train_loss", "val_pr_auc"]
    soft = csvio.read_soft_labels(out / "soft_labels.csv")
    assert int(csvio.read_manifest(out / "train.manifest")["n_soft"]) == len(soft)
    csvio.read_lr_params(out / "imputer.txt")
    assert cli.main(["evaluate", "--config", cfg, "--setting", "PostRankingSignals", "--rate", "0.2"]) == 0
    (row,) = csvio.read_csv_dicts(out / "metrics.csv")
    assert 0 < float(row["pr_auc"]) <= 1 and row["optin_rate"] == "0.2"


def test_sweep_outputs_and_rerun(workdir):
    tmp, cfg = workdir
    out = tmp / "out"
    assert cli.main(["sweep", "--config", cfg]) == 0
    report = (out / "report.csv").read_text()
    rows = csvio.read_csv_dicts(out / "report.csv")
    assert list(rows[0]) == csvio.REPORT_HEADER
    keys = [(r["setting"], float(r["optin_rate"])) for r in rows]
    assert keys == sorted(keys) and len(rows) == 4 * 2
    assert len(csvio.read_csv_dicts(out / "cells.csv")) == (1 + 1 + 2 + 2) * 2
    assert "PR-AUC" in (out / "summary.txt").read_text()
    assert csvio.read_manifest(out / "sweep.manifest")["n_seeds"] == "2"
    assert cli.main(["sweep", "--config", cfg, "--force"]) == 0
    assert (out / "report.csv").read_text() == report


def test_sweep_requires_baseline(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{"settings": ["AndroidOnly"], "output_dir": "%s"}' % (tmp_path / "o"))
    assert cli.main(["sweep", "--config", str(p)]) == 2
    assert "NonPPCT" in capsys.readouterr().err


def test_sweep_failure_flushes_partial(workdir, monkeypatch, capsys):
    import ppctsim.evaluator as ev
    from ppctsim.errors import StageError

    tmp, cfg = workdir
    real, calls = ev.run_setting, []

    def flaky(*args):
        calls.append(1)
        if len(calls) > 3:
            raise StageError("train", ValueError("boom"))
        return real(*args)

    monkeypatch.setattr(ev, "run_setting", flaky)
    assert cli.main(["sweep", "--config", cfg]) == 3
    assert "stage 'train'" in capsys.readouterr().err
    out = tmp / "out"
    assert not (out / "report.csv").exists()
    assert len(csvio.read_csv_dicts(out / "cells.csv.partial")) == 3
