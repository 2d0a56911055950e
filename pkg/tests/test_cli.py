import hashlib
import json

import numpy as np
import pytest

from pwl import cli


def write_config(path, body):
    path.write_text(json.dumps(body))
    return str(path)


def test_unknown_experiment_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {})
    with pytest.raises(SystemExit):
        cli.main(["teleport", "--config", cfg])


def test_missing_config_is_config_error(tmp_path):
    assert cli.main(["duality", "--config", str(tmp_path / "no.json")]) == 2


def test_schema_violation_is_config_error(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"gird": {"cells": 32}})
    assert cli.main(["duality", "--config", cfg]) == 2


def test_stability_needs_three_horizons(tmp_path):
    cfg = write_config(
        tmp_path / "c.json",
        {
            "grid": {"extent": 12.0, "cells": 24},
            "params": {"T_values": [2.0, 4.0], "n_seeds": 2},
            "out": str(tmp_path / "out"),
        },
    )
    assert cli.main(["stability", "--config", cfg]) == 2


def duality_body(out):
    return {
        "grid": {"extent": 12.0, "cells": 48},
        "solver": {"boundary": "dirichlet"},
        "noise": {"kappa_radius": 2.0},
        "params": {"horizon": 3.0},
        "out": out,
    }


def test_duality_smoke_and_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "c.json", duality_body(str(out)))
    assert cli.main(["duality", "--config", cfg]) == 0
    text = capsys.readouterr().out
    assert "PASS duality_residual" in text
    report = json.loads((out / "report.json").read_text())
    assert report["passed"]
    assert "duality.csv" in report["artifacts"]
    resolved = (out / "config.resolved.json").read_text()
    assert '"out"' not in resolved
    digest = hashlib.sha256(resolved.rstrip("\n").encode()).hexdigest()
    assert report["config_digest"] == digest


def test_duality_runs_are_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        cfg = write_config(tmp_path / f"{name}.json", duality_body(str(out)))
        assert cli.main(["duality", "--config", cfg]) == 0
        outs.append(out)
    assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
    assert (outs[0] / "duality.csv").read_bytes() == (outs[1] / "duality.csv").read_bytes()


def test_seed_resolution_order(tmp_path, monkeypatch):
    monkeypatch.setenv("PWL_SEED", "77")
    cfg = cli.resolve_config("duality", {}, {"seed": None})
    assert cfg["seed"] == 77
    cfg = cli.resolve_config("duality", {}, {"seed": 5})
    assert cfg["seed"] == 5
    cfg = cli.resolve_config("duality", {"seed": 3}, {"seed": None})
    assert cfg["seed"] == 3


def test_cli_seed_flag_changes_noise(tmp_path):
    reports = []
    for seed in (1, 2):
        out = tmp_path / f"s{seed}"
        cfg = write_config(tmp_path / f"s{seed}.json", duality_body(str(out)))
        assert cli.main(["duality", "--config", cfg, "--seed", str(seed)]) == 0
        rows = (out / "duality.csv").read_text().strip().split("\n")[1]
        reports.append(rows)
    assert reports[0] != reports[1]


def test_emit_plot_guards(tmp_path):
    with pytest.raises(ValueError):
        cli.emit_plot({}, "line", tmp_path / "x.svg")
    with pytest.raises(ValueError):
        cli.emit_plot({"a": ([1, 2], [3, 4])}, "contour", tmp_path / "x.svg")


def test_emit_plot_deterministic_svg(tmp_path):
    xs = [1.0, 2.0, 4.0]
    ys = [1.0, 0.25, 0.0625]
    p1 = cli.emit_plot({"v": (xs, ys)}, "loglog", tmp_path / "a.svg")
    p2 = cli.emit_plot({"v": (xs, ys)}, "loglog", tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
