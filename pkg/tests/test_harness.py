import json
import os

import numpy as np
import pandas as pd
import pytest

from hierforecast.cli import main
from hierforecast.config import PipelineConfig, config_hash, load_config
from hierforecast.errors import ConfigError, DataError
from hierforecast.ingest import read_holidays_csv, read_series_csv
from hierforecast.pipelines import RunArtifacts, run_pipeline
from hierforecast.reports import emit_reports, metrics_text

rng = np.random.default_rng(61)


def synth_config(seed=3, figures=False, **extra):
    cfg = {
        "pipeline": "synthetic",
        "seed": seed,
        "synthetic": {"zones": 2, "days": 24, "noise_sigma": 0.02,
                      "shift_day": 16, "level_shifts": [0.9, 0.9]},
        "experts": {"forest": {"n_trees": 20}, "refit_every_days": 2,
                    "quantiles": [0.1, 0.5, 0.9]},
        "models": {"formula": "load ~ cat(DayType) + s(Instant, k=10, cyclic) + s(temp, k=6)"},
        "output": {"figures": figures},
    }
    cfg.update(extra)
    return cfg


def write_covid_fixture(root):
    r = np.random.default_rng(5)
    idx = pd.date_range("2020-01-06", periods=48 * 40, freq="30min")
    inst = (idx.hour * 2 + idx.minute // 30).to_numpy()
    loads = {}
    for z, (lv, ph) in {"z1": (60.0, 0.3), "z2": (40.0, 1.1)}.items():
        temp = 8 + 6 * np.sin(2 * np.pi * np.arange(len(idx)) / (48 * 15)) \
            + 2 * np.sin(2 * np.pi * inst / 48 + ph) + r.normal(0, 0.5, len(idx))
        load = lv * (1 + 0.25 * np.sin(2 * np.pi * inst / 48 + ph)) \
            + 0.25 * (temp - 10) ** 2 + r.normal(0, lv * 0.02, len(idx))
        pd.DataFrame({"timestamp": idx, "load": load, "Temp": temp}).to_csv(
            os.path.join(root, f"{z}.csv"), index=False)
        loads[z] = (load, temp)
    g = pd.DataFrame({
        "timestamp": idx,
        "load": loads["z1"][0] + loads["z2"][0],
        "Temp": 0.5 * (loads["z1"][1] + loads["z2"][1]),
    })
    g.to_csv(os.path.join(root, "global.csv"), index=False)


def covid_config(root, seed=1):
    return {
        "pipeline": "covid_hier",
        "seed": seed,
        "data": {"zones": {"z1": os.path.join(root, "z1.csv"),
                           "z2": os.path.join(root, "z2.csv")},
                 "global_path": os.path.join(root, "global.csv"), "target": "load"},
        "windows": {"source": ["2020-01-06", "2020-02-03"],
                    "test": ["2020-02-03", "2020-02-15"],
                    "target_start": "2020-02-05",
                    "periods": [["pre", "2020-02-03", "2020-02-05"],
                                ["post", "2020-02-05", "2020-02-15"]]},
        "models": {"formula": "load ~ cat(DayType) + lin(load.48) + s(Temp99, k=5)",
                   "lags": [48]},
        "experts": {"forest": {"n_trees": 15}, "residual_lags": [48],
                    "min_train_rows": 24},
        "output": {"figures": False},
    }


def write_uk_fixture(root):
    r = np.random.default_rng(11)
    idx = pd.date_range("2019-01-07", periods=48 * 170, freq="30min")
    inst = (idx.hour * 2 + idx.minute // 30).to_numpy()
    days = np.arange(len(idx)) / 48.0
    dow = idx.dayofweek.to_numpy()
    temp = 10 + 3 * np.sin(2 * np.pi * inst / 48 + 1.0) + r.normal(0, 0.8, len(idx))
    shape = 1 + 0.3 * np.sin(2 * np.pi * inst / 48 + 0.4) + 0.05 * np.sin(4 * np.pi * inst / 48)
    wk = 1 - 0.1 * (dow >= 5)
    hol = ["2019-02-18", "2019-03-18", "2019-04-22", "2019-05-06", "2019-06-03"]
    hol_dates = {pd.Timestamp(d).date() for d in hol}
    is_hol = np.array([d.date() in hol_dates for d in idx])
    temp_eff = 0.6 * (temp - 12) ** 2 * (1 - 0.3 * (dow >= 5))
    load = 420 * (shape * wk) - 25 * is_hol + temp_eff + 0.35 * days + r.normal(0, 5, len(idx))
    pd.DataFrame({"timestamp": idx, "load": load, "Temp": temp}).to_csv(
        os.path.join(root, "national.csv"), index=False)
    sm_idx = idx[48 * 100:]
    pd.DataFrame({"timestamp": sm_idx,
                  "load": load[48 * 100:] * 0.02 + r.normal(0, 0.5, len(sm_idx)),
                  "Temp": temp[48 * 100:] + 0.5}).to_csv(
        os.path.join(root, "smartmeter.csv"), index=False)
    pd.DataFrame({"date": hol}).to_csv(os.path.join(root, "holidays.csv"), index=False)


def uk_config(root, seed=2):
    return {
        "pipeline": "uk_smartmeter",
        "seed": seed,
        "data": {"national_path": os.path.join(root, "national.csv"),
                 "smartmeter_path": os.path.join(root, "smartmeter.csv"),
                 "holidays_path": os.path.join(root, "holidays.csv")},
        "windows": {"source": ["2019-01-07", "2019-05-20"],
                    "test": ["2019-05-20", "2019-06-24"],
                    "local_learn": ["2019-04-15", "2019-05-20"]},
        "models": {"formula": ("load_c ~ cat(DayType) + lin(Holiday) "
                               "+ te(Instant, Temp, k=6, 5) "
                               "+ s(Instant, k=10, cyclic, by=DayType) + s(Temp99, k=8)"),
                   "local_formula": "load ~ cat(DayType) + s(Instant, k=8, cyclic) + s(Temp, k=5)"},
        "experts": {"forest": {"n_trees": 25}, "residual_folds": 3},
        "output": {"figures": False},
    }


class TestConfigValidation:
    def test_unknown_pipeline(self):
        with pytest.raises(ConfigError, match="pipeline"):
            PipelineConfig.from_dict({"pipeline": "nope"})

    def test_overlapping_windows(self):
        with pytest.raises(ConfigError, match="overlap"):
            PipelineConfig.from_dict({
                "pipeline": "synthetic",
                "windows": {"source": ["2021-01-01", "2021-02-01"],
                            "test": ["2021-01-20", "2021-03-01"]},
            })

    def test_unknown_formula_token(self):
        with pytest.raises(ConfigError, match="unknown formula token"):
            PipelineConfig.from_dict(synth_config(models={"formula": "y ~ magic(x)"}))

    def test_missing_data_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            PipelineConfig.from_dict({
                "pipeline": "covid_hier",
                "windows": {"source": ["2020-01-01", "2020-02-01"]},
                "data": {"global_path": str(tmp_path / "absent.csv"), "zones": {}},
            })

    def test_bad_strategy(self):
        with pytest.raises(ConfigError, match="unknown strategy"):
            PipelineConfig.from_dict(synth_config(aggregation={"strategies": ["bogus"]}))

    def test_bad_quantiles(self):
        bad = synth_config()
        bad["experts"]["quantiles"] = [0.5, 1.5]
        with pytest.raises(ConfigError, match="quantiles"):
            PipelineConfig.from_dict(bad)

    def test_bad_forest_settings(self):
        bad = synth_config()
        bad["experts"]["forest"] = {"n_trees": 0}
        with pytest.raises(ConfigError, match="forest"):
            PipelineConfig.from_dict(bad)

    def test_config_hash_stable(self):
        c1 = PipelineConfig.from_dict(synth_config())
        c2 = PipelineConfig.from_dict(synth_config())
        assert config_hash(c1) == config_hash(c2)
        c3 = PipelineConfig.from_dict(synth_config(seed=99))
        assert config_hash(c1) != config_hash(c3)

    def test_load_config_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError, match="valid JSON"):
            load_config(bad)


class TestIngest:
    def test_read_series_csv(self, tmp_path):
        idx = pd.date_range("2021-01-01", periods=10, freq="30min")
        path = tmp_path / "s.csv"
        pd.DataFrame({"timestamp": idx, "load": np.arange(10.0), "g": list("ababababab")}).to_csv(
            path, index=False)
        frame = read_series_csv(path, target="load", zone_id="z", categoricals={"g": ["a", "b"]})
        assert len(frame) == 10
        assert str(frame.data["g"].dtype) == "category"

    def test_missing_header_detected(self, tmp_path):
        path = tmp_path / "noheader.csv"
        path.write_text("2021-01-01T00:00,1.0\n2021-01-01T00:30,2.0\n")
        with pytest.raises(DataError, match="header"):
            read_series_csv(path, target="load", zone_id="z")

    def test_holidays(self, tmp_path):
        path = tmp_path / "h.csv"
        pd.DataFrame({"date": ["2021-01-01", "2021-05-01"]}).to_csv(path, index=False)
        hol = read_holidays_csv(path)
        assert len(hol) == 2


class TestSyntheticPipeline:
    def test_run_and_reports(self, tmp_path):
        config = PipelineConfig.from_dict(synth_config(figures=True))
        art = run_pipeline(config)
        assert {"gam", "hierarchical_unscaled"} <= set(art.metrics["model"])
        assert art.manifest["config_sha256"] == config_hash(config)
        assert art.manifest["seed"] == config.seed
        out = tmp_path / "run"
        files = emit_reports(art, out, figures=True)
        for name in ("manifest.json", "metrics.csv", "metrics.txt", "forecasts.csv",
                     "weights.csv", "panel.csv"):
            assert (out / name).exists(), name
        assert (out / "figures" / "forecasts.png").exists()
        assert any(f.endswith(".png") for f in map(str, files))

    def test_emission_idempotent(self, tmp_path):
        config = PipelineConfig.from_dict(synth_config())
        art = run_pipeline(config)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        emit_reports(art, d1, figures=False)
        emit_reports(art, d2, figures=False)
        for name in os.listdir(d1):
            if name == "figures":
                continue
            b1 = (d1 / name).read_bytes()
            b2 = (d2 / name).read_bytes()
            assert b1 == b2, name

    def test_rerun_metrics_byte_identical(self, tmp_path):
        config = PipelineConfig.from_dict(synth_config())
        a1 = run_pipeline(config)
        a2 = run_pipeline(PipelineConfig.from_dict(synth_config()))
        assert a1.metrics.to_csv(index=False) == a2.metrics.to_csv(index=False)
        assert a1.forecasts.to_csv(index=False) == a2.forecasts.to_csv(index=False)

    def test_empty_window_emits_valid_csv(self, tmp_path):
        art = RunArtifacts(
            kind="synthetic",
            manifest={"pipeline": "synthetic"},
            metrics=pd.DataFrame(columns=["period", "model", "mape_pct", "rmse", "n_rows"]),
            forecasts=pd.DataFrame(columns=["timestamp", "strategy", "forecast_MW"]),
        )
        out = tmp_path / "empty"
        emit_reports(art, out, figures=True)
        text = (out / "forecasts.csv").read_text()
        assert text.strip() == "timestamp,strategy,forecast_MW"


class TestCovidPipeline:
    def test_smoke(self, tmp_path):
        write_covid_fixture(tmp_path)
        config = PipelineConfig.from_dict(covid_config(tmp_path))
        art = run_pipeline(config)
        pre = art.metrics[(art.metrics["period"] == "pre") & (art.metrics["model"] == "gam_rf_median")]
        # warm-up period: corrected experts not yet available
        assert pre["n_rows"].iloc[0] == 0
        post = art.metrics[art.metrics["period"] == "post"]
        assert np.isfinite(post[post["model"] != "gam_rf_median"]["mape_pct"]).all()
        assert art.panel is not None and len(art.panel.expert_names) == 11

    def test_default_formula_end_to_end(self, tmp_path):
        # exercises the stock per-instant formula: combined DayType:DLS
        # factor, per-daytype lag slopes, smoothed temps, daily extremes
        r = np.random.default_rng(8)
        idx = pd.date_range("2019-11-04", periods=48 * 86, freq="30min")
        inst = (idx.hour * 2 + idx.minute // 30).to_numpy()
        t = np.arange(len(idx))
        loads = {}
        for z, (lv, ph) in {"z1": (60.0, 0.3), "z2": (40.0, 1.1)}.items():
            temp = 8 + 5 * np.sin(2 * np.pi * t / (48 * 40)) \
                + 2 * np.sin(2 * np.pi * inst / 48 + ph) + r.normal(0, 0.5, len(idx))
            load = lv * (1 + 0.25 * np.sin(2 * np.pi * inst / 48 + ph)) \
                + 0.004 * (temp - 12) ** 2 * lv + r.normal(0, lv * 0.02, len(idx))
            pd.DataFrame({"timestamp": idx, "load": load, "Temp": temp}).to_csv(
                tmp_path / f"{z}.csv", index=False)
            loads[z] = (load, temp)
        pd.DataFrame({"timestamp": idx, "load": loads["z1"][0] + loads["z2"][0],
                      "Temp": 0.5 * (loads["z1"][1] + loads["z2"][1])}).to_csv(
            tmp_path / "global.csv", index=False)
        config = PipelineConfig.from_dict({
            "pipeline": "covid_hier", "seed": 1,
            "data": {"zones": {"z1": str(tmp_path / "z1.csv"), "z2": str(tmp_path / "z2.csv")},
                     "global_path": str(tmp_path / "global.csv"), "target": "load"},
            "windows": {"source": ["2019-11-11", "2020-01-20"],
                        "test": ["2020-01-20", "2020-01-27"],
                        "target_start": "2020-01-21"},
            "experts": {"forest": {"n_trees": 10}, "min_train_rows": 24},
            "output": {"figures": False, "importance": False},
        })
        art = run_pipeline(config)
        gam = art.metrics[art.metrics["model"] == "gam"]
        assert np.isfinite(gam["mape_pct"]).all()
        assert gam["mape_pct"].iloc[0] < 15.0
        assert art.panel is not None


class TestUkPipeline:
    def test_table2_shape(self, tmp_path):
        write_uk_fixture(tmp_path)
        config = PipelineConfig.from_dict(uk_config(tmp_path))
        art = run_pipeline(config)
        models = list(art.metrics["model"])
        assert models == ["GAM.nat", "RF.nat", "GAM.RF.nat", "GAM.RF.local"]
        assert "n_covariates" in art.metrics.columns
        assert art.metrics["n_covariates"].tolist() == sorted(
            art.metrics["n_covariates"].tolist()
        )  # transfer adds covariates monotonically
        text = metrics_text(art.metrics)
        for row in ("RMSE", "MAPE %", "Nb covariates"):
            assert row in text
        assert {"GAM.RF.nat", "GAM.RF.local"} <= set(art.importance)
        for rep in art.importance.values():
            assert abs(rep.normalized.sum() - 100.0) < 1e-9


class TestCli:
    def test_run_subcommand(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(synth_config()))
        out_dir = tmp_path / "out"
        code = main(["run", str(cfg_path), "--out", str(out_dir)])
        assert code == 0
        assert (out_dir / "metrics.csv").exists()
        assert "files written" in capsys.readouterr().out

    def test_run_bad_config_exit_2(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"pipeline": "nope"}))
        assert main(["run", str(cfg_path)]) == 2
        assert "error:" in capsys.readouterr().err

    def test_seed_override_changes_manifest(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(synth_config()))
        out_dir = tmp_path / "out"
        assert main(["run", str(cfg_path), "--out", str(out_dir), "--seed", "17"]) == 0
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["seed"] == 17

    def test_synth_subcommand(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"zones": 2, "days": 3, "seed": 1}))
        out_dir = tmp_path / "data"
        assert main(["synth", str(spec_path), "--out", str(out_dir)]) == 0
        assert (out_dir / "z1.csv").exists()
        assert (out_dir / "global.csv").exists()
        frame = read_series_csv(out_dir / "z1.csv", target="load", zone_id="z1",
                                categoricals={"DayType": list(range(1, 8))})
        assert len(frame) == 3 * 48

    def test_report_subcommand(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(synth_config()))
        out_dir = tmp_path / "out"
        main(["run", str(cfg_path), "--out", str(out_dir)])
        code = main(["report", str(out_dir)])
        assert code == 0
        assert (out_dir / "figures" / "forecasts.png").exists()

    def test_report_missing_dir_exit_2(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "nope")]) == 2


class TestDeterminismAcrossProcessBoundary:
    def test_cli_rerun_byte_identical(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(synth_config()))
        d1, d2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["run", str(cfg_path), "--out", str(d1)]) == 0
        assert main(["run", str(cfg_path), "--out", str(d2)]) == 0
        for name in ("metrics.csv", "forecasts.csv", "weights.csv", "panel.csv",
                     "manifest.json"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name
