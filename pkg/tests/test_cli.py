import csv
import json

import pytest

from aaforecast.cli import main

FAST = ["--tau", "6", "--hidden", "4", "--epochs", "2", "--lr", "0.01", "--optimizer", "adam",
        "--mc-samples", "8", "--grid", "0.2,0.5"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text("n_series = 3\nT = 96\nseed = 4\n")
    cfg = ["--config", str(root / "run.cfg")]
    assert main(["synth", *cfg, "--out", str(root / "synth")]) == 0
    data = ["--data", str(root / "synth" / "series.csv")]
    assert main(["decompose", *cfg, *data, "--out", str(root / "dec")]) == 0
    assert main(["train", *cfg, *data, *FAST, "--out", str(root / "train")]) == 0
    ck = ["--checkpoint", str(root / "train" / "checkpoint.json")]
    assert main(["forecast", *cfg, *data, *FAST, *ck, "--out", str(root / "fc")]) == 0
    assert main(["evaluate", *cfg, *data, *FAST, *ck, "--out", str(root / "ev")]) == 0
    return root, cfg, data, ck


def test_synth_outputs(chain):
    root = chain[0]
    rows = _rows(root / "synth" / "series.csv")
    assert list(rows[0]) == ["series_id", "timestamp", "value", "event_level"]
    assert len({r["series_id"] for r in rows}) == 3 and len(rows) == 3 * 96
    assert (root / "synth" / "series.png").stat().st_size > 0
    assert "seed = 4" in (root / "synth" / "resolved.cfg").read_text()


def test_decompose_outputs(chain):
    root = chain[0]
    comp = sorted((root / "dec" / "components").glob("*.csv"))
    assert len(comp) == 3
    rows = _rows(comp[0])
    assert list(rows[0]) == ["index", "x", "e", "s", "t", "a", "r", "rho"]
    for r in rows:
        prod = float(r["s"]) * float(r["t"]) * float(r["a"]) * float(r["r"])
        meta = json.loads(comp[0].with_suffix(".meta.json").read_text())
        assert prod == pytest.approx(float(r["x"]) + meta["offset"], rel=1e-9)
    assert {"offset", "rho_c", "span", "cycle"} <= set(meta)
    assert list(root.glob("dec/components/*.png"))


def test_train_outputs(chain):
    root = chain[0]
    trace = _rows(root / "train" / "loss_trace.csv")
    assert list(trace[0]) == ["epoch", "train_loss", "val_loss"] and len(trace) == 2
    ck = json.loads((root / "train" / "checkpoint.json").read_text())
    assert ck["hyper"]["model"]["tau"] == 6
    assert (root / "train" / "loss.png").exists()


def test_forecast_outputs(chain):
    root = chain[0]
    rows = _rows(root / "fc" / "forecast.csv")
    assert list(rows[0]) == ["series_id", "t", "mean", "sd", "p_star", "q05", "q50", "q95"]
    assert {float(r["p_star"]) for r in rows} <= {0.2, 0.5}
    for r in rows:
        assert float(r["q05"]) <= float(r["q50"]) <= float(r["q95"])
        assert float(r["sd"]) >= 0
    assert min(int(r["t"]) for r in rows) == int(0.8 * 96)
    assert (root / "fc" / "forecast.png").exists() and (root / "fc" / "p_star.png").exists()


def test_evaluate_outputs(chain):
    root = chain[0]
    table = _rows(root / "ev" / "table.csv")
    assert table[0]["method"] == "full" and table[0]["window"] == "6"
    report = json.loads((root / "ev" / "report.json").read_text())
    assert report["full"]["aggregate"]["crps"] == pytest.approx(float(table[0]["crps"]))
    assert (root / "ev" / "report.png").exists()


def test_rerun_byte_identical(chain, tmp_path):
    root, cfg, data, ck = chain
    assert main(["train", *cfg, *data, *FAST, "--out", str(tmp_path / "t2")]) == 0
    for name in ("checkpoint.json", "loss_trace.csv"):
        assert (tmp_path / "t2" / name).read_bytes() == (root / "train" / name).read_bytes()
    assert main(["evaluate", *cfg, *data, *FAST, *ck, "--out", str(tmp_path / "e2")]) == 0
    for name in ("table.csv", "steps.csv", "per_series.csv", "report.json"):
        assert (tmp_path / "e2" / name).read_bytes() == (root / "ev" / name).read_bytes()


def test_missing_checkpoint(chain, tmp_path, capsys):
    _, cfg, data, _ = chain
    missing = tmp_path / "nope.json"
    code = main(["forecast", *cfg, *data, *FAST, "--checkpoint", str(missing), "--out", str(tmp_path / "f")])
    assert code != 0
    err = capsys.readouterr().err
    assert str(missing) in err and "load checkpoint" in err
    assert not (tmp_path / "f").exists()
    assert not list(tmp_path.glob(".f.tmp-*"))


def test_failure_keeps_previous_output(chain, tmp_path):
    _, cfg, data, _ = chain
    out = tmp_path / "keep"
    assert main(["synth", *cfg, "--out", str(out), "--no-plot"]) == 0
    before = (out / "series.csv").read_bytes()
    assert main(["forecast", *cfg, *data, "--checkpoint", str(tmp_path / "x.json"), "--out", str(out)]) == 1
    assert (out / "series.csv").read_bytes() == before
    assert not list(tmp_path.glob(".keep.*"))


def test_module_error_names_module_and_step(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("series_id,timestamp,value\nx,0,1\nx,1,2\nx,3,3\n")
    code = main(["decompose", "--data", str(tmp_path / "d.csv"), "--out", str(tmp_path / "o")])
    assert code == 1
    err = capsys.readouterr().err
    assert "series.SeriesError" in err and "non-uniform spacing" in err


def test_config_error_exit_2(tmp_path, capsys):
    assert main(["synth", "--tau", "7", "--out", str(tmp_path / "o")]) == 2
    assert "not in allowed set" in capsys.readouterr().err


def test_variant_mismatch(chain, tmp_path, capsys):
    _, cfg, data, ck = chain
    code = main(["evaluate", *cfg, *data, *FAST, *ck, "--ablation", "no-attention", "--out", str(tmp_path / "v")])
    assert code == 1
    assert "different variant" in capsys.readouterr().err


def test_no_uncertainty_uses_static_p(chain, tmp_path):
    _, cfg, data, ck = chain
    assert main(["forecast", *cfg, *data, *FAST, *ck, "--ablation", "no-uncertainty",
                 "--out", str(tmp_path / "s"), "--no-plot"]) == 0
    assert {r["p_star"] for r in _rows(tmp_path / "s" / "forecast.csv")} == {"0.6"}


def test_zero_shot_chain(chain, tmp_path):
    _, cfg, data, _ = chain
    z = ["--protocol", "zero-shot", "--no-plot"]
    assert main(["train", *cfg, *data, *FAST, *z, "--out", str(tmp_path / "zt")]) == 0
    ck = json.loads((tmp_path / "zt" / "checkpoint.json").read_text())["hyper"]
    assert ck["held_out_ids"] and not set(ck["held_out_ids"]) & set(ck["train_ids"])
    assert main(["forecast", *cfg, *data, *FAST, *z, "--checkpoint", str(tmp_path / "zt" / "checkpoint.json"),
                 "--out", str(tmp_path / "zf")]) == 0
    ids = {r["series_id"] for r in _rows(tmp_path / "zf" / "forecast.csv")}
    assert ids == set(ck["held_out_ids"])


def test_ablation_protocol(chain, tmp_path):
    _, cfg, data, _ = chain
    assert main(["evaluate", *cfg, *data, *FAST, "--epochs", "1", "--protocol", "ablation", "--no-plot",
                 "--out", str(tmp_path / "ab")]) == 0
    methods = [r["method"] for r in _rows(tmp_path / "ab" / "table.csv")]
    assert methods == ["full", "no-attention", "no-star", "no-uncertainty"]


def test_set_override(tmp_path):
    assert main(["synth", "--set", "scenario=single", "--set", "T=40", "--cycle", "4", "--no-plot",
                 "--out", str(tmp_path / "s")]) == 0
    assert len(_rows(tmp_path / "s" / "series.csv")) == 40
