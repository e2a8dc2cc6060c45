"""End-to-end experiment pipelines.

Three pipelines share the run-artifact contract:

* ``synthetic``: seeded hierarchical generator, per-zone additive models
  on a source window, daily-refit quantile correctors over a target
  window, all four aggregation strategies, period-split metrics.
* ``covid_hier``: the same streaming engine driven by per-zone CSVs,
  with per-instant additive models (one per half-hour) and per-instant
  normalization.
* ``uk_smartmeter``: detrend + national additive model, plain forest,
  stacked corrector, and a second stacked corrector with effects
  transferred from a finer-scale (smart-meter) model; four-model error
  table on a held-out window.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from . import __version__
from .additive import extract_effects, fit as fit_additive, parse_formula
from .aggregation import STRATEGIES, StrategyConfig, run_strategy
from .config import PipelineConfig, config_hash
from .errors import ConfigError, DataError
from .forest import ForestConfig, fit_forest, permutation_importance
from .ingest import read_holidays_csv, read_series_csv
from .metrics import ale, mape, rmse
from .series import (
    CalendarSpec,
    FrameView,
    SeriesFrame,
    add_calendar,
    add_lags,
    apply_detrend,
    exp_smooth,
    fit_detrend,
    fit_normalizer,
    normalize,
    trend_values,
)
from .stacking import QUANTILE_LEVELS, RESIDUAL_COL, ExpertPanel, StackingConfig, expert_names, fit_stacked
from .synthetic import SyntheticSpec, generate_synthetic

__all__ = ["RunArtifacts", "run_pipeline", "InstantModel"]


@dataclass
class RunArtifacts:
    """Everything a run produces, ready for report emission."""

    kind: str
    manifest: dict
    metrics: pd.DataFrame
    forecasts: pd.DataFrame
    weights: pd.DataFrame | None = None
    panel: ExpertPanel | None = None
    importance: dict = field(default_factory=dict)
    ale_curves: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    normalization: object = None


# ---------------------------------------------------------------------------
# per-instant additive models
# ---------------------------------------------------------------------------

class InstantModel:
    """One additive model per instant of day, fitted independently."""

    def __init__(self, models: dict, column: str):
        self.models = models
        self.column = column
        first = next(iter(models.values()))
        self.target = first.target

    @classmethod
    def fit(cls, frame, formula, column: str = "Instant", lambda_policy="gcv") -> "InstantModel":
        df = frame.data
        instants = np.unique(df[column].to_numpy())
        models = {}
        for h in instants:
            mask = (df[column].to_numpy() == h) & frame.usable
            if mask.sum() == 0:
                continue
            view = FrameView(df.loc[mask], frame.periods, None)
            models[int(h)] = fit_additive(formula, view, lambda_policy=lambda_policy)
        if not models:
            raise DataError("no usable rows to fit per-instant models")
        return cls(models, column)

    def _route(self, df: pd.DataFrame):
        inst = df[self.column].to_numpy()
        for h in np.unique(inst):
            if int(h) not in self.models:
                raise DataError(f"no model fitted for instant {int(h)}")
            yield int(h), inst == h

    def predict(self, df: pd.DataFrame) -> np.ndarray:
        out = np.empty(len(df))
        for h, mask in self._route(df):
            out[mask] = self.models[h].predict(df.loc[mask])
        return out

    def effect_frame(self, df: pd.DataFrame, prefix: str = "src") -> pd.DataFrame:
        """Per-effect feature columns, routed through the instant models.

        Labels are the union over instants; an effect absent from some
        instant's model (a factor level never observed in that slice)
        leaves NaN there, which downstream fits refuse loudly rather
        than silently imputing.
        """
        labels = []
        for m in self.models.values():
            for e in extract_effects(m):
                if e.label not in labels:
                    labels.append(e.label)
        cols = {lab: np.full(len(df), np.nan) for lab in labels}
        for h, mask in self._route(df):
            for eff in extract_effects(self.models[h]):
                cols[eff.label][mask] = eff.on_frame(df.loc[mask])
        out = pd.DataFrame(index=df.index)
        for lab in labels:
            out[f"{prefix}.f_{lab}"] = cols[lab]
        return out

    def to_dict(self) -> dict:
        return {"column": self.column, "models": {str(h): m.to_dict() for h, m in self.models.items()}}


def _gam_effect_frame(model, df: pd.DataFrame, prefix: str = "src") -> pd.DataFrame:
    if isinstance(model, InstantModel):
        return model.effect_frame(df, prefix)
    out = pd.DataFrame(index=df.index)
    for eff in extract_effects(model):
        out[f"{prefix}.f_{eff.label}"] = eff.on_frame(df)
    return out


# ---------------------------------------------------------------------------
# shared hierarchical streaming engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HierSettings:
    formula: str
    source_window: tuple
    test_window: tuple
    target_start: pd.Timestamp
    periods: tuple = ()
    per_instant_gam: bool = False
    per_instant_norm: bool = False
    lags: tuple = ()
    resid_lags: tuple = (48,)
    quantiles: tuple = QUANTILE_LEVELS
    forest: ForestConfig = ForestConfig(n_trees=100)
    refit_every_days: int = 1
    min_train_rows: int = 48
    clip_factor: float = 2.0
    strategies: tuple = STRATEGIES
    loss_mode: str = "gradient"
    forest_covariates: tuple | None = None
    importance: bool = True
    ale_variables: tuple = ()
    instant_column: str = "Instant"


def _hier_experiment(zone_frames: dict, global_frame: SeriesFrame, s: HierSettings):
    zones = list(zone_frames)
    gid = global_frame.zone_id
    raw_frames = {**zone_frames, gid: global_frame}
    zone_levels = zones + [gid]

    table = fit_normalizer(raw_frames, s.source_window, per_instant=s.per_instant_norm)
    nframes = {z: normalize(f, table) for z, f in raw_frames.items()}
    if s.lags:
        nframes = {z: add_lags(f, list(s.lags)) for z, f in nframes.items()}

    base_idx = nframes[gid].index
    for z, f in nframes.items():
        if not f.index.equals(base_idx):
            raise DataError(f"zone {z!r} timestamps differ from the global series")

    # static models on the source window
    gams = {}
    for z, f in nframes.items():
        src = f.window(*s.source_window)
        if s.per_instant_gam:
            gams[z] = InstantModel.fit(src, s.formula, column=s.instant_column)
        else:
            gams[z] = fit_additive(s.formula, src)

    test = {z: f.window(*s.test_window) for z, f in nframes.items()}
    ts = test[gid].index
    clip_max = max(float(f.window(*s.source_window).target_values().max()) for f in nframes.values())
    bound = s.clip_factor * clip_max

    target = nframes[gid].target
    names = expert_names(s.quantiles)
    streams = {}
    for z in zone_levels:
        gpred = gams[z].predict(test[z].data)
        streams[(z, "gam")] = np.clip(gpred, 0.0, bound)
        for e in names[1:]:
            streams[(z, e)] = np.full(len(ts), np.nan)

    # corrector region: observed target-period rows used to train forests
    region = {z: f.window(s.target_start, s.test_window[1]) for z, f in nframes.items()}
    ridx = region[gid].index
    region_usable = {z: region[z].usable for z in zone_levels}
    resid = {}
    feats = {}
    feat_cols = None
    for z in zone_levels:
        rf = region[z]
        pred = gams[z].predict(rf.data)
        resid[z] = rf.target_values() - pred
        base_cols = (
            list(s.forest_covariates)
            if s.forest_covariates is not None
            else [c for c in rf.data.columns if c != target]
        )
        tab = rf.data[base_cols].copy()
        eff = _gam_effect_frame(gams[z], rf.data, prefix="src")
        for c in eff.columns:
            tab[c] = eff[c].to_numpy()
        for lag in s.resid_lags:
            col = np.full(len(tab), np.nan)
            if lag < len(tab):
                col[lag:] = resid[z][:-lag]
            tab[f"{RESIDUAL_COL}.{lag}"] = col
        tab["zone"] = pd.Categorical([z] * len(tab), categories=zone_levels)
        tab[RESIDUAL_COL] = resid[z]
        feats[z] = tab
        cols = [c for c in tab.columns if c != RESIDUAL_COL]
        if feat_cols is None:
            feat_cols = cols
        elif cols != feat_cols:
            raise DataError(f"zone {z!r} forest covariates differ from {zones[0]!r}")
    ind_cols = [c for c in feat_cols if c != "zone"]

    region_dates = ridx.normalize()
    test_dates = ts.normalize()
    first_target_day = region_dates[0] if len(ridx) else None
    qs = list(s.quantiles)
    forests = None
    last_fit_day = None
    min_rows = max(s.min_train_rows, 2 * s.forest.min_node_size)

    for day in pd.unique(test_dates):
        day = pd.Timestamp(day)
        if first_target_day is None or day <= first_target_day:
            continue
        train_mask = np.asarray(region_dates < day)
        ok = True
        train_tabs = {}
        for z in zone_levels:
            tab = _finite_rows(feats[z].loc[train_mask & region_usable[z]])
            if len(tab) < min_rows:
                ok = False
                break
            train_tabs[z] = tab
        if not ok:
            continue
        if forests is None or last_fit_day is None or (day - last_fit_day).days >= s.refit_every_days:
            ind = {
                z: fit_forest(train_tabs[z], RESIDUAL_COL, s.forest, features=ind_cols)
                for z in zone_levels
            }
            common_tab = pd.concat([train_tabs[z] for z in zone_levels], ignore_index=True)
            common = fit_forest(common_tab, RESIDUAL_COL, s.forest, features=feat_cols)
            forests = (ind, common)
            last_fit_day = day
        ind, common = forests
        day_mask = np.asarray(test_dates == day)
        if not day_mask.any():
            continue
        day_region_mask = np.asarray(region_dates == day)
        for z in zone_levels:
            rows = feats[z].loc[day_region_mask]
            if len(rows) == 0:
                continue
            gpred = streams[(z, "gam")][day_mask]
            ind_q = ind[z].predict_quantile(rows[ind_cols], qs)
            com_q = common.predict_quantile(rows[feat_cols], qs)
            for i, q in enumerate(qs):
                streams[(z, f"ind_q{q:g}")][day_mask] = np.clip(gpred + ind_q[i], 0.0, bound)
                streams[(z, f"com_q{q:g}")][day_mask] = np.clip(gpred + com_q[i], 0.0, bound)

    panel = ExpertPanel(
        timestamps=ts,
        step=global_frame.step,
        zone_ids=zones,
        global_id=gid,
        expert_names=names,
        streams=streams,
        clip_bound=bound,
    ).validate()

    outcomes = {z: raw_frames[z].window(*s.test_window).target_values() for z in zone_levels}
    scale_g = table.scale_for(gid, ts, global_frame.step)

    results = {}
    weights = []
    for kind in s.strategies:
        res = run_strategy(StrategyConfig(kind, loss_mode=s.loss_mode), panel, outcomes, table)
        results[kind] = res
        weights.append(res.weights)
    weights_df = pd.concat(weights, ignore_index=True) if weights else None

    model_streams = {kind: results[kind].forecast for kind in s.strategies}
    model_streams["gam"] = streams[(gid, "gam")] * scale_g
    med = f"ind_q{0.5:g}"
    if med in names:
        model_streams["gam_rf_median"] = streams[(gid, med)] * scale_g

    rows = []
    periods = list(s.periods) or [("test", s.test_window[0], s.test_window[1])]
    actual_g = outcomes[gid]
    for label, p0, p1 in periods:
        in_p = (ts >= p0) & (ts < p1)
        for name, stream in model_streams.items():
            mask = in_p & np.isfinite(stream)
            if mask.sum() == 0:
                rows.append({"period": label, "model": name, "mape_pct": np.nan, "rmse": np.nan, "n_rows": 0})
                continue
            rows.append(
                {
                    "period": label,
                    "model": name,
                    "mape_pct": mape(actual_g[mask], stream[mask]),
                    "rmse": rmse(actual_g[mask], stream[mask]),
                    "n_rows": int(mask.sum()),
                }
            )
    metrics = pd.DataFrame(rows)

    fc_rows = [pd.DataFrame({"timestamp": ts, "strategy": "actual", "forecast_MW": actual_g})]
    for name, stream in model_streams.items():
        fc_rows.append(pd.DataFrame({"timestamp": ts, "strategy": name, "forecast_MW": stream}))
    forecasts = pd.concat(fc_rows, ignore_index=True)

    importance = {}
    ale_curves = {}
    if forests is not None:
        ind, common = forests
        if s.importance:
            importance["common"] = permutation_importance(
                common, pd.concat([_finite_rows(feats[z]) for z in zone_levels], ignore_index=True),
                "squared", seed=s.forest.seed, window="target-period",
            )
            importance["individual_global"] = permutation_importance(
                ind[gid], _finite_rows(feats[gid]), "squared", seed=s.forest.seed, window="target-period",
            )
        for var in s.ale_variables:
            ale_curves[var] = ale(common, _finite_rows(feats[gid]), var, quantile_level=0.5)

    models = {z: gams[z].to_dict() for z in zone_levels}
    return panel, results, metrics, forecasts, weights_df, importance, ale_curves, models, table


def _finite_rows(tab: pd.DataFrame) -> pd.DataFrame:
    numeric = tab.select_dtypes(include=[np.number])
    keep = np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1)
    return tab.loc[keep]


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def run_pipeline(config: PipelineConfig) -> RunArtifacts:
    if config.pipeline == "synthetic":
        return _run_synthetic(config)
    if config.pipeline == "covid_hier":
        return _run_covid(config)
    if config.pipeline == "uk_smartmeter":
        return _run_uk(config)
    raise ConfigError(f"unknown pipeline {config.pipeline!r}")


def _manifest(config: PipelineConfig, extra: dict | None = None) -> dict:
    man = {
        "pipeline": config.pipeline,
        "config_sha256": config_hash(config),
        "seed": config.seed,
        "package_version": __version__,
    }
    if extra:
        man.update(extra)
    return man


def _forest_config(config: PipelineConfig, default_trees: int) -> ForestConfig:
    fc = dict(config.experts.get("forest", {}))
    fc.setdefault("n_trees", default_trees)
    fc.setdefault("seed", config.seed)
    return ForestConfig(**fc)


def _hier_settings(config: PipelineConfig, defaults: dict, windows: dict | None = None) -> HierSettings:
    w = windows if windows is not None else config.windows
    e = config.experts
    a = config.aggregation
    m = config.models
    if "test" not in w:
        raise ConfigError("windows.test is required")
    target_start = w.get("target_start", w["test"][0])
    return HierSettings(
        formula=m.get("formula", defaults["formula"]),
        source_window=w["source"],
        test_window=w["test"],
        target_start=target_start,
        periods=tuple(w.get("periods", [])),
        per_instant_gam=m.get("per_instant_gam", defaults.get("per_instant_gam", False)),
        per_instant_norm=m.get("per_instant_norm", defaults.get("per_instant_norm", False)),
        lags=tuple(m.get("lags", defaults.get("lags", ()))),
        resid_lags=tuple(e.get("residual_lags", (48,))),
        quantiles=tuple(e.get("quantiles", QUANTILE_LEVELS)),
        forest=_forest_config(config, defaults.get("n_trees", 100)),
        refit_every_days=int(e.get("refit_every_days", 1)),
        min_train_rows=int(e.get("min_train_rows", 48)),
        clip_factor=float(e.get("clip_factor", 2.0)),
        strategies=tuple(a.get("strategies", STRATEGIES)),
        loss_mode=a.get("loss_mode", "gradient"),
        forest_covariates=tuple(m["forest_covariates"]) if m.get("forest_covariates") else None,
        importance=bool(config.output.get("importance", True)),
        ale_variables=tuple(config.output.get("ale_variables", ())),
    )


SYNTH_DEFAULTS = {
    "formula": "load ~ cat(DayType) + s(Instant, k=12, cyclic) + s(temp, k=8)",
    "n_trees": 100,
    "lags": (),
}


def _run_synthetic(config: PipelineConfig) -> RunArtifacts:
    spec = config.synthetic or SyntheticSpec(seed=config.seed)
    zone_frames, global_frame = generate_synthetic(spec)
    idx = global_frame.index

    w = dict(config.windows)
    if "source" not in w:
        # default split: experts start one week before the shift (or at 60%)
        split = spec.shift_day if spec.shift_day is not None else int(spec.days * 0.6)
        warm = max(split - 7, 1)
        w["source"] = (idx[0], idx[warm * spec.steps_per_day])
        w["test"] = (idx[warm * spec.steps_per_day], idx[-1] + global_frame.step)
        w["target_start"] = idx[warm * spec.steps_per_day]
        if spec.shift_day is not None and not w.get("periods"):
            t0 = idx[spec.shift_day * spec.steps_per_day]
            w["periods"] = [
                ("pre-shift", w["test"][0], t0),
                ("post-shift", t0, w["test"][1]),
            ]
    settings = _hier_settings(config, SYNTH_DEFAULTS, windows=w)
    panel, results, metrics, forecasts, weights, importance, ale_curves, models, table = _hier_experiment(
        zone_frames, global_frame, settings
    )
    manifest = _manifest(config, {"zones": list(zone_frames), "n_rows": len(idx)})
    return RunArtifacts(
        kind="synthetic",
        manifest=manifest,
        metrics=metrics,
        forecasts=forecasts,
        weights=weights,
        panel=panel,
        importance=importance,
        ale_curves=ale_curves,
        models=models,
        normalization=table,
    )


COVID_DEFAULTS = {
    "formula": (
        "load ~ cat(DayTypeDLS) + lin(load.48):cat(DayType) + lin(load.336) "
        "+ s(Date, k=5) + s(ToY, k=20) + te(Date, Temp, k=4, 5) "
        "+ s(Temp95, k=10) + s(Temp99, k=10) + te(TempMin99, TempMax99, k=5, 5)"
    ),
    "per_instant_gam": True,
    "per_instant_norm": True,
    "lags": (48, 336),
    "n_trees": 500,
}


def _prepare_covid_frame(frame: SeriesFrame, holidays, smoothing: dict) -> SeriesFrame:
    frame = add_calendar(frame, CalendarSpec(holidays=holidays))
    df = frame.data
    if "Temp" not in df.columns:
        raise DataError(f"zone {frame.zone_id!r}: expected a 'Temp' column")
    temp = df["Temp"].to_numpy(dtype=float)
    cols = {}
    for name, alpha in smoothing.items():
        cols[name] = exp_smooth(temp, alpha)
    frame = frame.with_columns(cols)
    df = frame.data
    if "Temp99" in df.columns:
        day = df.index.normalize()
        grouped = df.groupby(day)["Temp99"]
        cols = {
            "TempMin99": grouped.transform("min").to_numpy(),
            "TempMax99": grouped.transform("max").to_numpy(),
        }
        frame = frame.with_columns(cols)
    day_num = (frame.index.asi8 - frame.index.asi8[0]) / 86_400e9
    dt_dls = (
        frame.data["DayType"].astype(str).to_numpy()
        + ":"
        + frame.data["DLS"].astype(str).to_numpy()
    )
    levels = [f"{d}:{s}" for d in range(1, 8) for s in (0, 1)]
    frame = frame.with_columns(
        {"Date": day_num, "DayTypeDLS": pd.Categorical(dt_dls, categories=levels)}
    )
    return frame


def _run_covid(config: PipelineConfig) -> RunArtifacts:
    data = config.data
    if "zones" not in data or "global_path" not in data:
        raise ConfigError("covid_hier needs data.zones (zone -> csv) and data.global_path")
    target = data.get("target", "load")
    categoricals = data.get("categoricals", {})
    holidays = read_holidays_csv(data["holidays_path"]) if data.get("holidays_path") else frozenset()
    smoothing = {k: float(v) for k, v in data.get("smoothed_temp", {"Temp95": 0.95, "Temp99": 0.99}).items()}

    zone_frames = {}
    for z, path in data["zones"].items():
        fr = read_series_csv(path, target=target, zone_id=z, categoricals=categoricals)
        zone_frames[z] = _prepare_covid_frame(fr, holidays, smoothing)
    gfr = read_series_csv(data["global_path"], target=target, zone_id=data.get("global_id", "global"),
                          categoricals=categoricals)
    global_frame = _prepare_covid_frame(gfr, holidays, smoothing)

    settings = _hier_settings(config, COVID_DEFAULTS)
    panel, results, metrics, forecasts, weights, importance, ale_curves, models, table = _hier_experiment(
        zone_frames, global_frame, settings
    )
    manifest = _manifest(config, {"zones": list(zone_frames)})
    return RunArtifacts(
        kind="covid_hier",
        manifest=manifest,
        metrics=metrics,
        forecasts=forecasts,
        weights=weights,
        panel=panel,
        importance=importance,
        ale_curves=ale_curves,
        models=models,
        normalization=table,
    )


UK_FORMULA = (
    "load_c ~ cat(DayType) + lin(Holiday) + lin(LongWeekEnd) "
    "+ te(Instant, Temp, k=20, 10) + s(Instant, k=40, cyclic, by=DayType) "
    "+ s(ToY, k=50, cyclic) + s(Temp99, k=40)"
)
UK_LOCAL_FORMULA = (
    "load ~ cat(DayType) + te(Instant, Temp, k=20, 10) "
    "+ s(Instant, k=40, cyclic, by=DayType) + s(ToY, k=50, cyclic)"
)


def _prepare_uk_frame(frame: SeriesFrame, holidays, smoothing: dict) -> SeriesFrame:
    frame = add_calendar(frame, CalendarSpec(holidays=holidays))
    if "Temp" not in frame.data.columns:
        raise DataError(f"zone {frame.zone_id!r}: expected a 'Temp' column")
    temp = frame.data["Temp"].to_numpy(dtype=float)
    return frame.with_columns({name: exp_smooth(temp, a) for name, a in smoothing.items()})


def _formula_covariates(formula: str) -> list:
    _, specs = parse_formula(formula)
    names = []
    for sp in specs:
        for n in sp.names + tuple(x for x in (sp.by, sp.by_cat) if x):
            if n not in names:
                names.append(n)
    return names


def _run_uk(config: PipelineConfig) -> RunArtifacts:
    data = config.data
    if "national_path" not in data:
        raise ConfigError("uk_smartmeter needs data.national_path")
    target = data.get("target", "load")
    holidays = read_holidays_csv(data["holidays_path"]) if data.get("holidays_path") else frozenset()
    smoothing = {
        k: float(v)
        for k, v in data.get(
            "smoothed_temp", {"Temp99": 0.99, "Temp02": 0.2, "Temp005": 0.05, "Temp001": 0.01}
        ).items()
    }

    national = read_series_csv(data["national_path"], target=target, zone_id="national")
    national = _prepare_uk_frame(national, holidays, smoothing)

    w = config.windows
    if "test" not in w:
        raise ConfigError("windows.test is required")
    learn_w, test_w = w["source"], w["test"]

    if config.models.get("detrend", True):
        trend = fit_detrend(national.window(*learn_w))
        national_c = apply_detrend(national, trend)  # target becomes load_c
        trend_test = trend_values(trend, national_c.window(*test_w).index)
    else:
        trend = None
        national_c = national.with_columns({f"{national.target}_c": national.target_values()})
        national_c = replace(national_c, target=f"{national.target}_c")
        trend_test = 0.0
    learn = national_c.window(*learn_w)
    test = national_c.window(*test_w)
    actual_test = national.window(*test_w).target_values()

    m = config.models
    formula = m.get("formula", UK_FORMULA)
    base_covs = m.get("forest_covariates") or _formula_covariates(formula)
    forest_cfg = _forest_config(config, 500)
    folds = int(config.experts.get("residual_folds", 5))

    gam_nat = fit_additive(formula, learn, lambda_policy=m.get("lambda_policy", "gcv"))
    pred_gam = gam_nat.predict(test.data) + trend_test

    rf_nat = fit_forest(learn, learn.target, forest_cfg, features=base_covs)
    pred_rf = rf_nat.predict_mean(test.data) + trend_test

    stack_cfg = StackingConfig(forest=forest_cfg, covariates=tuple(base_covs))
    gam_rf_nat = fit_stacked(
        None, learn, {"target": formula, "source": None},
        quantiles=(0.5,), residual_method=("block_cv", folds), config=stack_cfg,
    )
    pred_stack_nat = gam_rf_nat.predict(test.data, q=0.5) + trend_test

    models_out = {"gam_national": gam_nat.to_dict()}
    if trend is not None:
        models_out["trend"] = {"mean": trend.mean, "knots": trend.basis.interior.tolist()}
    rows_models = {
        "GAM.nat": (pred_gam, len(_formula_covariates(formula))),
        "RF.nat": (pred_rf, len(base_covs)),
        "GAM.RF.nat": (pred_stack_nat, len(gam_rf_nat.feature_columns)),
    }

    importance = {
        "GAM.RF.nat": permutation_importance(
            gam_rf_nat.forest,
            _stacked_eval_table(gam_rf_nat, learn),
            "squared",
            seed=config.seed,
            window="learn",
        )
    }

    if data.get("smartmeter_path"):
        local = read_series_csv(data["smartmeter_path"], target=data.get("smartmeter_target", "load"),
                                zone_id="smartmeter")
        if data.get("smartmeter_aggregate"):
            total = local.data.sum(axis=1, numeric_only=True)
            local = local.with_columns({"load": total})
        local = _prepare_uk_frame(local, holidays, smoothing)
        local_w = w.get("local_learn", (max(local.index[0], learn_w[0]), learn_w[1]))
        local_formula = m.get("local_formula", UK_LOCAL_FORMULA)
        gam_rf_local = fit_stacked(
            local.window(*local_w), learn,
            {"target": formula, "source": local_formula},
            quantiles=(0.5,), residual_method=("block_cv", folds),
            config=StackingConfig(forest=forest_cfg, covariates=tuple(base_covs), prefix_source="loc"),
        )
        pred_stack_local = gam_rf_local.predict(test.data, q=0.5) + trend_test
        rows_models["GAM.RF.local"] = (pred_stack_local, len(gam_rf_local.feature_columns))
        importance["GAM.RF.local"] = permutation_importance(
            gam_rf_local.forest,
            _stacked_eval_table(gam_rf_local, learn),
            "squared",
            seed=config.seed,
            window="learn",
        )
        models_out["gam_local"] = gam_rf_local.source_model.to_dict()

    rows = []
    for name, (pred, n_cov) in rows_models.items():
        rows.append(
            {
                "period": "test",
                "model": name,
                "mape_pct": mape(actual_test, pred),
                "rmse": rmse(actual_test, pred),
                "n_covariates": n_cov,
                "n_rows": len(actual_test),
            }
        )
    metrics = pd.DataFrame(rows)

    ts = test.index
    fc = [pd.DataFrame({"timestamp": ts, "model": "actual", "forecast_MW": actual_test})]
    for name, (pred, _) in rows_models.items():
        fc.append(pd.DataFrame({"timestamp": ts, "model": name, "forecast_MW": pred}))
    forecasts = pd.concat(fc, ignore_index=True)

    manifest = _manifest(config, {"models": list(rows_models)})
    return RunArtifacts(
        kind="uk_smartmeter",
        manifest=manifest,
        metrics=metrics,
        forecasts=forecasts,
        importance=importance,
        models=models_out,
    )


def _stacked_eval_table(stacked, frame) -> pd.DataFrame:
    table = stacked.features_for(frame).copy()
    resid = frame.data[stacked.gam.target].to_numpy(dtype=float) - stacked.gam.predict(frame.data)
    table[RESIDUAL_COL] = resid
    usable = frame.usable if hasattr(frame, "usable") else np.ones(len(table), dtype=bool)
    return table.loc[usable]
