"""Stacked GAM-RF transfer and the multi-zone quantile expert factory.

The stacking recipe: fit an additive model, estimate its honest
forecasting residuals (block cross-validation or an expanding online
schedule), then train a quantile forest to predict those residuals from
the original covariates augmented with evaluated smooth-effect columns
(from the source-level model, the target-level model, or both). The
final forecast is exactly GAM prediction + forest correction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .additive import AdditiveModel, extract_effects, fit as fit_additive
from .errors import DataError, NumericalError
from .forest import ForestConfig, QuantileForest, fit_forest
from .series import FrameView, SeriesFrame

__all__ = [
    "StackingConfig",
    "StackedModel",
    "ExpertPanel",
    "ExpertConfig",
    "transfer_features",
    "stacking_residuals",
    "fit_stacked",
    "build_expert_panel",
    "QUANTILE_LEVELS",
]

QUANTILE_LEVELS = (0.05, 0.1, 0.5, 0.9, 0.95)
RESIDUAL_COL = "_resid"


def _frame_df(frame):
    return frame.data if isinstance(frame, SeriesFrame) else frame


def transfer_features(source_model: AdditiveModel, common, target_frame, prefix: str = "src"):
    """Augment the target frame with evaluated source-model effects.

    Effects whose covariates all belong to `common` are evaluated on the
    target rows and appended as `<prefix>.f_<effect label>` columns.
    Existing columns are never altered. By-factor smooths expand to one
    column per factor level.
    """
    common = set(common)
    if not common:
        return target_frame
    df = _frame_df(target_frame)
    missing = sorted(n for n in common if n not in df.columns)
    if missing:
        raise DataError(f"common covariates missing from target frame: {missing}")

    cols = {}
    for eff in extract_effects(source_model):
        if not set(eff.names) <= common:
            continue
        cols[f"{prefix}.f_{eff.label}"] = eff.on_frame(df)
    if not cols:
        return target_frame
    if isinstance(target_frame, SeriesFrame):
        return target_frame.with_columns(cols)
    out = df.copy()
    for name, values in cols.items():
        out[name] = values
    return out


def _refit_like(model: AdditiveModel, frame) -> AdditiveModel:
    specs = [t.spec for t in model.terms]
    try:
        return fit_additive((model.target, specs), frame, lambda_policy=model.lambdas)
    except NumericalError:
        # folds can lose a factor level or a covariate's variance; a tiny
        # ridge pins the unidentifiable coefficients near zero
        return fit_additive((model.target, specs), frame, lambda_policy=model.lambdas, ridge=1e-8)


def stacking_residuals(model: AdditiveModel, frame, method=("block_cv", 5)) -> np.ndarray:
    """Honest residuals of the additive model on its own frame.

    ("block_cv", folds): contiguous time blocks, each predicted by a
    model refit (same terms, same smoothing weights) on the other blocks.
    ("online", min_train_rows): daily refit boundaries; each day is
    predicted by a model refit on all rows strictly before it. Rows
    before the first boundary come back NaN.
    """
    kind = method[0]
    df = _frame_df(frame)
    usable = frame.usable if isinstance(frame, SeriesFrame) else np.ones(len(df), dtype=bool)
    y = df[model.target].to_numpy(dtype=float)
    out = np.full(len(df), np.nan)

    if kind == "block_cv":
        folds = int(method[1])
        if folds < 2:
            raise ValueError("block_cv needs folds >= 2")
        rows = np.nonzero(usable)[0]
        blocks = np.array_split(rows, folds)
        for b, block in enumerate(blocks):
            if len(block) == 0:
                raise DataError(f"block_cv fold {b} is empty")
            train_mask = usable.copy()
            train_mask[block] = False
            sub = _subframe(frame, train_mask)
            refit = _refit_like(model, sub)
            pred = refit.predict(df.iloc[block])
            out[block] = y[block] - pred
        return out

    if kind == "online":
        min_train = int(method[1])
        if not isinstance(frame, SeriesFrame):
            raise DataError("online residuals need a timestamped SeriesFrame")
        dates = frame.index.normalize()
        day_starts = np.unique(dates)
        for day in day_starts:
            day_rows = np.nonzero(np.asarray(dates == day) & usable)[0]
            if len(day_rows) == 0:
                continue
            train_mask = usable & np.asarray(dates < day)
            if train_mask.sum() < min_train:
                continue
            sub = _subframe(frame, train_mask)
            refit = _refit_like(model, sub)
            out[day_rows] = y[day_rows] - refit.predict(df.iloc[day_rows])
        return out

    raise ValueError(f"unknown residual method {kind!r}")


def _subframe(frame, mask):
    if isinstance(frame, SeriesFrame):
        return FrameView.of(frame, mask)
    return frame.loc[mask]


# ---------------------------------------------------------------------------
# stacked model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StackingConfig:
    forest: ForestConfig = ForestConfig()
    common: tuple | None = None       # covariates eligible for source-effect transfer
    covariates: tuple | None = None   # forest inputs (default: every non-target column)
    include_target_effects: bool = True
    prefix_source: str = "src"
    prefix_target: str = "tgt"


@dataclass
class StackedModel:
    """GAM + quantile-forest corrector; forecast decomposes exactly."""

    gam: AdditiveModel
    source_model: AdditiveModel | None
    common: tuple
    forest: QuantileForest
    quantiles: tuple
    residual_method: tuple
    config: StackingConfig
    feature_columns: list

    def features_for(self, frame) -> pd.DataFrame:
        df = _frame_df(frame)
        if self.source_model is not None and self.common:
            aug = transfer_features(self.source_model, self.common, df, prefix=self.config.prefix_source)
        else:
            aug = df.copy()
        if self.config.include_target_effects:
            aug = transfer_features(
                self.gam, [n for t in self.gam.terms for n in t.spec.names], aug,
                prefix=self.config.prefix_target,
            )
        missing = [c for c in self.feature_columns if c not in aug.columns]
        if missing:
            raise DataError(f"stacked model inputs missing: {missing}")
        return aug[self.feature_columns]

    def correction(self, frame, q: float | None = None) -> np.ndarray:
        feats = self.features_for(frame)
        if q is None:
            return self.forest.predict_mean(feats)
        return self.forest.predict_quantile(feats, q)

    def predict(self, frame, q: float | None = None) -> np.ndarray:
        return self.gam.predict(_frame_df(frame)) + self.correction(frame, q)


def fit_stacked(
    source_frame,
    target_frame,
    formulas: dict,
    quantiles=(0.5,),
    residual_method=("block_cv", 5),
    config: StackingConfig = StackingConfig(),
) -> StackedModel:
    """Three-step stacking: source effects -> honest residuals -> corrector.

    formulas: {"target": ..., "source": ... or None}. When no source
    formula is given (or source_frame is None) the transfer step is
    skipped and the corrector sees only target covariates and the target
    model's own effects.
    """
    qs = tuple(float(q) for q in quantiles)
    if any(not 0 < q < 1 for q in qs):
        raise ValueError(f"quantile levels must lie in (0,1): {qs}")

    source_model = None
    common: tuple = ()
    if source_frame is not None and formulas.get("source"):
        source_model = fit_additive(formulas["source"], source_frame)
        tgt_cols = set(_frame_df(target_frame).columns)
        if config.common is not None:
            common = tuple(config.common)
        else:
            names = {n for t in source_model.terms for n in t.spec.names}
            common = tuple(sorted(n for n in names if n in tgt_cols))

    gam = fit_additive(formulas["target"], target_frame)
    resid = stacking_residuals(gam, target_frame, residual_method)

    df = _frame_df(target_frame)
    base_cols = (
        list(config.covariates)
        if config.covariates is not None
        else [c for c in df.columns if c != gam.target]
    )
    aug = df
    if source_model is not None:
        aug = transfer_features(source_model, common, aug, prefix=config.prefix_source)
    if config.include_target_effects:
        own_names = [n for t in gam.terms for n in t.spec.names]
        aug = transfer_features(gam, own_names, aug, prefix=config.prefix_target)
    effect_cols = [
        c for c in aug.columns
        if c.startswith(f"{config.prefix_source}.f_") or c.startswith(f"{config.prefix_target}.f_")
    ]
    feature_columns = base_cols + effect_cols

    train = aug[feature_columns].copy()
    train[RESIDUAL_COL] = resid
    keep = np.isfinite(resid)
    if isinstance(target_frame, SeriesFrame):
        keep &= target_frame.usable
    train = train.loc[keep]
    if len(train) == 0:
        raise DataError("no rows with computed residuals to train the corrector")
    forest = fit_forest(train, RESIDUAL_COL, config.forest, features=feature_columns)

    return StackedModel(
        gam=gam,
        source_model=source_model,
        common=common,
        forest=forest,
        quantiles=qs,
        residual_method=tuple(residual_method),
        config=config,
        feature_columns=feature_columns,
    )


# ---------------------------------------------------------------------------
# expert panel
# ---------------------------------------------------------------------------

def expert_names(quantiles=QUANTILE_LEVELS) -> list:
    names = ["gam"]
    names += [f"ind_q{q:g}" for q in quantiles]
    names += [f"com_q{q:g}" for q in quantiles]
    return names


@dataclass
class ExpertPanel:
    """Aligned per-zone expert forecast streams on the normalized scale.

    Streams may start as NaN while an expert does not exist yet (the
    warm-up before any residuals are observed); once live a stream must
    stay finite to the end.
    """

    timestamps: pd.DatetimeIndex
    step: pd.Timedelta
    zone_ids: list
    global_id: str
    expert_names: list
    streams: dict
    clip_bound: float

    def values(self, zone) -> np.ndarray:
        return np.vstack([self.streams[(zone, e)] for e in self.expert_names])

    def validate(self):
        T = len(self.timestamps)
        for z in self.zone_ids + [self.global_id]:
            for e in self.expert_names:
                if (z, e) not in self.streams:
                    raise DataError(f"panel missing stream ({z}, {e})")
                v = self.streams[(z, e)]
                if v.shape != (T,):
                    raise DataError(f"stream ({z}, {e}) misaligned")
                finite = np.isfinite(v)
                if finite.any():
                    first = int(np.argmax(finite))
                    if not np.isfinite(v[first:]).all():
                        raise DataError(f"stream ({z}, {e}) has holes after start")
        return self

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for z in self.zone_ids + [self.global_id]:
            vals = self.values(z)
            for i, e in enumerate(self.expert_names):
                rows.append(
                    pd.DataFrame(
                        {"timestamp": self.timestamps, "zone": z, "expert": e, "value": vals[i]}
                    )
                )
        return pd.concat(rows, ignore_index=True)


@dataclass(frozen=True)
class ExpertConfig:
    """Batch expert-panel construction settings.

    source_window trains the per-zone GAMs and the normalizing means;
    panel_window is where experts emit forecasts. Forest correctors are
    trained on residuals from the source window (block CV) and applied
    over the panel window; the streaming daily-refit variant lives in
    the pipeline layer.
    """

    quantiles: tuple = QUANTILE_LEVELS
    forest: ForestConfig = ForestConfig(n_trees=100)
    residual_method: tuple = ("block_cv", 5)
    source_window: tuple = None
    panel_window: tuple = None
    clip_factor: float = 2.0
    covariates: tuple | None = None
    zone_column: str = "zone"


def _forest_feature_table(frame, gam, covariates, zone_label=None, zone_levels=None, zone_column="zone"):
    df = frame.data.copy()
    aug = transfer_features(gam, [n for t in gam.terms for n in t.spec.names], df, prefix="tgt")
    feats = (
        list(covariates)
        if covariates is not None
        else [c for c in df.columns if c != frame.target]
    )
    feats += [c for c in aug.columns if c.startswith("tgt.f_")]
    table = aug[feats].copy()
    if zone_label is not None:
        table[zone_column] = pd.Categorical([zone_label] * len(table), categories=zone_levels)
        feats = feats + [zone_column]
    return table, feats


def build_expert_panel(zone_frames: dict, global_frame, formulas, config: ExpertConfig) -> ExpertPanel:
    """Batch construction of the 11-experts-per-zone panel.

    zone_frames: zone id -> normalized SeriesFrame. global_frame: the
    normalized global-level SeriesFrame. formulas: one formula string
    applied per zone and at the global level.
    """
    if config.source_window is None or config.panel_window is None:
        raise ValueError("ExpertConfig.source_window and panel_window are required")
    zones = list(zone_frames)
    gid = global_frame.zone_id
    if gid in zone_frames:
        raise DataError(f"global id {gid!r} collides with a zone id")
    frames = dict(zone_frames)
    frames[gid] = global_frame

    formula = formulas if isinstance(formulas, str) else formulas["target"]
    qs = tuple(config.quantiles)

    panel_frames = {z: f.window(*config.panel_window) for z, f in frames.items()}
    ts = panel_frames[gid].index
    for z, f in panel_frames.items():
        if not f.index.equals(ts):
            raise DataError(f"zone {z!r} panel window misaligned with global")

    # GAMs + honest residuals on the source window
    gams, resid_tables, feats_per_zone = {}, {}, {}
    zone_levels = zones + [gid]
    clip_max = 0.0
    for z, f in frames.items():
        src = f.window(*config.source_window)
        clip_max = max(clip_max, float(np.nanmax(src.target_values())))
        gams[z] = fit_additive(formula, src)
        resid = stacking_residuals(gams[z], src, config.residual_method)
        table, feats = _forest_feature_table(
            src, gams[z], config.covariates, zone_label=z, zone_levels=zone_levels,
            zone_column=config.zone_column,
        )
        table[RESIDUAL_COL] = resid
        keep = np.isfinite(resid) & src.usable
        resid_tables[z] = table.loc[keep]
        feats_per_zone[z] = feats
    bound = config.clip_factor * clip_max

    common_table = pd.concat([resid_tables[z] for z in zone_levels], ignore_index=True)
    common_feats = feats_per_zone[gid]
    common_forest = fit_forest(common_table, RESIDUAL_COL, config.forest, features=common_feats)

    names = expert_names(qs)
    streams = {}
    for z in zone_levels:
        pf = panel_frames[z]
        gam_pred = gams[z].predict(pf.data)
        ind_feats = feats_per_zone[z][:-1]  # without the zone column
        ind_forest = fit_forest(
            resid_tables[z], RESIDUAL_COL, config.forest, features=ind_feats
        )
        eval_table, _ = _forest_feature_table(
            pf, gams[z], config.covariates, zone_label=z, zone_levels=zone_levels,
            zone_column=config.zone_column,
        )
        ind_q = ind_forest.predict_quantile(eval_table[ind_feats], list(qs))
        com_q = common_forest.predict_quantile(eval_table[common_feats], list(qs))
        streams[(z, "gam")] = np.clip(gam_pred, 0.0, bound)
        for i, q in enumerate(qs):
            streams[(z, f"ind_q{q:g}")] = np.clip(gam_pred + ind_q[i], 0.0, bound)
            streams[(z, f"com_q{q:g}")] = np.clip(gam_pred + com_q[i], 0.0, bound)

    return ExpertPanel(
        timestamps=ts,
        step=global_frame.step,
        zone_ids=zones,
        global_id=gid,
        expert_names=names,
        streams=streams,
        clip_bound=bound,
    ).validate()
