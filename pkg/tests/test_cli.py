import csv
import json

import numpy as np
import pytest

from nowcast_cde import cli, ncde

QUICK = {"lr": 0.003, "batch_size": 32, "max_epochs": 6, "hidden_alpha": 4, "hidden_beta": 4,
         "steps_per_month": 2, "z_next_mode": "smoothed_last", "em_max_iter": 40}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps({"k": 1, "d": 8, "t_months": 240, "seed": 7}))
    return tmp_path


def write_config(path, **kw):
    doc = {"synthetic": "spec.json", **QUICK, **kw}
    path.write_text(json.dumps(doc))
    return str(path)


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_synth_writes_files_and_is_deterministic(workdir):
    spec = str(workdir / "spec.json")
    assert cli.main(["synth", "--config", spec, "--out", str(workdir / "a")]) == 0
    assert cli.main(["synth", "--config", spec, "--out", str(workdir / "b")]) == 0
    for name in ("panel.csv", "meta.json", "truth.json"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()
    truth = json.loads((workdir / "a" / "truth.json").read_text())
    assert {"A", "loadings", "factors"} <= set(truth)
    assert len(truth["factors"]) == 240
    assert not (workdir / "a" / ".lock").exists()


def test_synth_rejects_k_zero(workdir, capsys):
    (workdir / "bad.json").write_text(json.dumps({"k": 0, "d": 8, "t_months": 240}))
    assert cli.main(["synth", "--config", str(workdir / "bad.json"), "--out", str(workdir / "x")]) == 2
    assert error_line(capsys)["error"] == "SyntheticError"


def test_synth_panel_reloads_through_config(workdir):
    assert cli.main(["synth", "--config", str(workdir / "spec.json"), "--out", str(workdir / "d")]) == 0
    cfg_path = workdir / "real.json"
    cfg_path.write_text(json.dumps({"panel": "d/panel.csv", "meta": "d/meta.json", **QUICK}))
    panel = cli.RunConfig.load(cfg_path).load_panel()
    assert panel.values.shape == (240, 9)


@pytest.fixture
def trained(workdir):
    cfg = write_config(workdir / "run.json")
    assert cli.main(["train", "--config", cfg, "--out", str(workdir / "run1"), "--no-plots"]) == 0
    return workdir


def test_train_artifacts(trained):
    out = trained / "run1"
    for name in ("checkpoint.npz", "history.csv", "nowcasts.csv", "factors.csv", "metrics.json"):
        assert (out / name).exists()
    doc = json.loads((out / "metrics.json").read_text())
    assert set(doc) == {"mse", "mape", "n_test", "config", "seed", "param_count"}
    assert (out / "history.csv").read_text().splitlines()[0] == "epoch,train_mse,val_mse"
    params, extra = ncde.load_checkpoint(out / "checkpoint.npz")
    assert ncde.param_count(params) == doc["param_count"]
    assert not list(out.glob("*.png"))


def test_train_rerun_is_byte_identical(trained):
    cfg = str(trained / "run.json")
    assert cli.main(["train", "--config", cfg, "--out", str(trained / "run2"), "--no-plots"]) == 0
    for name in ("metrics.json", "nowcasts.csv", "history.csv", "factors.csv", "checkpoint.npz"):
        assert (trained / "run1" / name).read_bytes() == (trained / "run2" / name).read_bytes()


def test_train_renders_figures(workdir):
    cfg = write_config(workdir / "run.json", max_epochs=2)
    assert cli.main(["train", "--config", cfg, "--out", str(workdir / "p")]) == 0
    for name in ("nowcasts.png", "history.png", "factors.png", "loadings.png"):
        assert (workdir / "p" / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_flags_override_config(workdir):
    cfg = cli.RunConfig.load(write_config(workdir / "run.json", seed=3, solver="euler", out="o"))
    assert cfg.train.seed == 3 and cfg.out == workdir / "o"
    args = cli.build_parser().parse_args(["train", "--config", "x", "--seed", "9", "--solver", "rk4"])
    cfg = cfg.with_flags(args)
    assert cfg.train.seed == 9 and cfg.train.solver == "rk4" and cfg.out == workdir / "o"
    # defaults fill what neither sets
    assert cfg.train.patience == 5 and cfg.window == 15


def test_missing_meta_exits_2_naming_path(workdir, capsys):
    (workdir / "panel.csv").write_text("date,indicator_id,value\n")
    cfg = workdir / "run.json"
    cfg.write_text(json.dumps({"panel": "panel.csv", "meta": "nope/meta.json", "out": "o"}))
    assert cli.main(["train", "--config", str(cfg)]) == 2
    line = error_line(capsys)
    assert "nope/meta.json" in line["message"] and line["exit_code"] == 2


@pytest.mark.parametrize("doc", [
    {"synthetic": "spec.json", "panel": "p.csv", "meta": "m.json"},
    {},
    {"synthetic": "spec.json", "learning_rate": 0.1},
    {"synthetic": "spec.json", "solver": "midpoint"},
    {"synthetic": "spec.json", "missing_rate": 1.0},
])
def test_config_errors(workdir, capsys, doc):
    cfg = workdir / "run.json"
    cfg.write_text(json.dumps(doc))
    assert cli.main(["train", "--config", str(cfg), "--out", str(workdir / "o")]) == 2
    error_line(capsys)


def test_runtime_error_exits_1(workdir, capsys, monkeypatch):
    def explode(*args, **kwargs):
        raise ncde.NcdeError("hidden state became non-finite at solver step 12")

    monkeypatch.setattr(cli.pipeline, "run", explode)
    cfg = write_config(workdir / "run.json")
    assert cli.main(["train", "--config", cfg, "--out", str(workdir / "o")]) == 1
    line = error_line(capsys)
    assert line == {"error": "NcdeError", "exit_code": 1,
                    "message": "hidden state became non-finite at solver step 12"}


def test_constant_target_is_a_data_error(workdir, capsys):
    (workdir / "spec.json").write_text(json.dumps({
        "k": 1, "d": 4, "t_months": 240, "seed": 1,
        "target_rule": {"kind": "linear", "intercept": 0.0, "coefs": [0.0]}}))
    cfg = write_config(workdir / "run.json", max_epochs=1)
    assert cli.main(["train", "--config", cfg, "--out", str(workdir / "o"), "--no-plots"]) == 2
    assert "constant" in error_line(capsys)["message"]


def test_locked_out_dir(workdir, capsys):
    out = workdir / "busy"
    out.mkdir()
    (out / ".lock").write_text("123")
    cfg = write_config(workdir / "run.json")
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 2
    assert "locked" in error_line(capsys)["message"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_ablate_missing(trained):
    cfg = str(trained / "run.json")
    assert cli.main(["ablate-missing", "--config", cfg, "--rates", "0,0.2", "--out",
                     str(trained / "abl"), "--no-plots"]) == 0
    rows = read_csv(trained / "abl" / "ablation.csv")
    assert list(rows[0]) == ["rate", "model", "mse", "mape"]
    assert len(rows) == 4
    assert all(np.isfinite(float(r["mse"])) and np.isfinite(float(r["mape"])) for r in rows)
    metrics = json.loads((trained / "run1" / "metrics.json").read_text())
    zero = next(r for r in rows if r["rate"] == "0.0" and r["model"] == "ncdenow")
    assert float(zero["mse"]) == metrics["mse"]
    assert float(zero["mape"]) == metrics["mape"]


def test_ablate_rejects_rate_one(trained, capsys):
    code = cli.main(["ablate-missing", "--config", str(trained / "run.json"), "--rates", "1.0",
                     "--out", str(trained / "x")])
    assert code == 2
    error_line(capsys)


def test_compare_solvers(trained):
    assert cli.main(["compare-solvers", "--config", str(trained / "run.json"), "--out",
                     str(trained / "cmp")]) == 0
    rows = read_csv(trained / "cmp" / "solvers.csv")
    assert [r["solver"] for r in rows] == ["euler", "rk4"]
    assert rows[0]["param_count"] == rows[1]["param_count"]


def test_param_report(workdir):
    a = write_config(workdir / "small.json", hidden_alpha=2, hidden_beta=2)
    b = write_config(workdir / "large.json", hidden_alpha=6, hidden_beta=6)
    assert cli.main(["param-report", "--config", a, "--config", b, "--out", str(workdir / "rep")]) == 0
    rows = read_csv(workdir / "rep" / "param_report.csv")
    assert [r["model"] for r in rows] == ["small", "large"]
    counts = [int(r["param_count"]) for r in rows]
    assert counts[1] > counts[0]
    # eight indicators plus the target's own history feed the encoders
    assert counts[0] == ncde.param_count_formula(9, 1, 2, 2, 1)
    for r in rows:
        assert repr(float(r["mape"])) == r["mape"]
    assert (workdir / "rep" / "param_report.png").exists()
