"""ML-Poly online convex aggregation and hierarchy-aware strategies.

The scalar recursion: weights are proportional to eta_j * max(R_j, 0)
with per-expert rates eta_j = 1/(1 + V_j), V_j the sum of squared
instantaneous regrets; when no expert has positive regret the weights
are uniform. Regrets use the gradient-linearized square loss by default,
with the raw loss difference available for comparison.

Strategies combine the per-zone quantile expert panels four ways:
full_disaggregated (one flat aggregation of all scaled experts),
vectorial (shared weights across zones), hierarchical_scaled (per-zone
aggregations feeding a second aggregation at the global level) and
hierarchical_unscaled (per-zone aggregations denormalized and summed,
the only coherent one).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .errors import DataError

__all__ = [
    "MlPolyState",
    "StrategyConfig",
    "StrategyResult",
    "mlpoly_step",
    "mlpoly_vector_step",
    "run_strategy",
    "replay_forecast",
    "load_weight_trace",
    "STRATEGIES",
]


def load_weight_trace(path_or_buf) -> pd.DataFrame:
    """Read a persisted weight trace back with full float precision.

    The default CSV float parser is off by an ulp on some values, which
    would break bit-for-bit replay.
    """
    return pd.read_csv(path_or_buf, float_precision="round_trip")

STRATEGIES = ("full_disaggregated", "vectorial", "hierarchical_scaled", "hierarchical_unscaled")


@dataclass(frozen=True)
class MlPolyState:
    """Per-expert regret bookkeeping; updates are pure functions."""

    names: tuple
    R: np.ndarray
    V: np.ndarray
    loss_mode: str = "gradient"  # "gradient" | "raw"
    bound: float | None = None

    @classmethod
    def fresh(cls, names, loss_mode="gradient", bound=None) -> "MlPolyState":
        names = tuple(names)
        if loss_mode not in ("gradient", "raw"):
            raise ValueError(f"unknown loss_mode {loss_mode!r}")
        return cls(names=names, R=np.zeros(len(names)), V=np.zeros(len(names)), loss_mode=loss_mode, bound=bound)

    @property
    def eta(self) -> np.ndarray:
        return 1.0 / (1.0 + self.V)

    def weights(self) -> np.ndarray:
        pos = np.maximum(self.R, 0.0)
        w = self.eta * pos
        total = w.sum()
        if total <= 0.0:
            return np.full(len(self.names), 1.0 / len(self.names))
        return w / total

    def expanded(self, new_names) -> "MlPolyState":
        """Append experts with zero regret (panel grew mid-stream)."""
        extra = [n for n in new_names if n not in self.names]
        if not extra:
            return self
        k = len(extra)
        return replace(
            self,
            names=self.names + tuple(extra),
            R=np.concatenate([self.R, np.zeros(k)]),
            V=np.concatenate([self.V, np.zeros(k)]),
        )


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise DataError(f"non-finite {what} passed to ML-Poly")


def mlpoly_step(state: MlPolyState, forecasts, outcome: float):
    """One scalar aggregation round: predict, observe, update regrets."""
    f = np.asarray(forecasts, dtype=float)
    if f.shape != (len(state.names),):
        raise DataError(f"expected {len(state.names)} expert forecasts, got shape {f.shape}")
    _check_finite(f, "expert forecasts")
    if not np.isfinite(outcome):
        raise DataError("non-finite outcome passed to ML-Poly")
    w = state.weights()
    pred = float(w @ f)
    if state.loss_mode == "gradient":
        lp = 2.0 * (pred - outcome)
        r = lp * (pred - f)
    else:
        r = (outcome - pred) ** 2 - (outcome - f) ** 2
    new = replace(state, R=state.R + r, V=state.V + r * r)
    return pred, new


def mlpoly_vector_step(state: MlPolyState, expert_matrix, outcome_vector):
    """Vector aggregation round: one weight per (multi-zone) expert.

    expert_matrix has shape (n_experts, n_coords); outcomes n_coords.
    """
    F = np.asarray(expert_matrix, dtype=float)
    y = np.asarray(outcome_vector, dtype=float)
    if F.ndim != 2 or F.shape[0] != len(state.names) or F.shape[1] != y.shape[0]:
        raise DataError(f"dimension mismatch: experts {F.shape}, outcomes {y.shape}")
    _check_finite(F, "expert forecasts")
    _check_finite(y, "outcomes")
    w = state.weights()
    pred = F.T @ w
    if state.loss_mode == "gradient":
        lp = 2.0 * (pred - y)
        r = ((pred - F) * lp).sum(axis=1)
    else:
        r = ((y - pred) ** 2 - (y - F) ** 2).sum(axis=1)
    new = replace(state, R=state.R + r, V=state.V + r * r)
    return pred, new


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    loss_mode: str = "gradient"
    zones: tuple | None = None  # default: panel's zone order

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; pick one of {STRATEGIES}")


@dataclass
class StrategyResult:
    strategy: str
    timestamps: pd.DatetimeIndex
    forecast: np.ndarray
    normalized: np.ndarray
    weights: pd.DataFrame
    zone_forecasts: dict | None = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"timestamp": self.timestamps, "strategy": self.strategy, "forecast_MW": self.forecast}
        )


class _TraceBuilder:
    def __init__(self):
        self.rows = []

    def add(self, step, layer, names, weights):
        for n, w in zip(names, weights):
            self.rows.append((step, layer, n, w))

    def frame(self, strategy, timestamps) -> pd.DataFrame:
        df = pd.DataFrame(self.rows, columns=["step", "layer", "expert", "weight"])
        df.insert(0, "timestamp", timestamps[df["step"].to_numpy()])
        df.insert(1, "strategy", strategy)
        return df


def _active_columns(values: np.ndarray, names, t: int, prev_active: set, what: str):
    """Experts with finite values at step t; vanishing experts are an error."""
    finite = np.isfinite(values[:, t])
    active = [n for n, ok in zip(names, finite) if ok]
    gone = prev_active - set(active)
    if gone:
        raise DataError(f"{what}: expert stream(s) {sorted(gone)} vanished at step {t}")
    return active


def _scalar_online(names, values, outcomes, loss_mode, trace, layer):
    """Run one scalar ML-Poly over possibly late-starting expert streams.

    values: (n_experts, T) with NaN prefixes for not-yet-available experts.
    Returns the prediction stream.
    """
    T = values.shape[1]
    name_idx = {n: i for i, n in enumerate(names)}
    state = None
    preds = np.empty(T)
    active_prev: set = set()
    for t in range(T):
        active = _active_columns(values, names, t, active_prev, layer)
        if not active:
            raise DataError(f"{layer}: no experts available at step {t}")
        if state is None:
            state = MlPolyState.fresh(active, loss_mode=loss_mode)
        else:
            state = state.expanded(active)
        f = np.array([values[name_idx[n], t] for n in state.names])
        trace.add(t, layer, state.names, state.weights())
        preds[t], state = mlpoly_step(state, f, outcomes[t])
        active_prev = set(active)
    return preds


def run_strategy(config: StrategyConfig, panel, outcomes: dict, table) -> StrategyResult:
    """Aggregate the panel online under one strategy.

    outcomes maps zone id (and the panel's global id) to the raw target
    series aligned with the panel timestamps. table is the normalization
    table used to scale outcomes and denormalize forecasts.
    """
    zones = list(config.zones) if config.zones is not None else list(panel.zone_ids)
    gid = panel.global_id
    ts = panel.timestamps
    T = len(ts)
    step = panel.step

    scale = {z: table.scale_for(z, ts, step) for z in zones + [gid]}
    y_norm = {}
    for z in zones + [gid]:
        if z not in outcomes:
            raise DataError(f"missing outcome series for zone {z!r}")
        y = np.asarray(outcomes[z], dtype=float)
        if y.shape != (T,):
            raise DataError(f"outcomes for zone {z!r} misaligned with panel")
        y_norm[z] = y / scale[z]

    trace = _TraceBuilder()
    zone_forecasts = None

    if not zones:
        # degenerate hierarchy: every strategy is the scalar aggregation
        # of the global experts
        names = [f"{gid}/{e}" for e in panel.expert_names]
        preds = _scalar_online(names, panel.values(gid), y_norm[gid], config.loss_mode, trace, "main")
        forecast = preds * scale[gid]
    elif config.kind == "full_disaggregated":
        names, blocks = [], []
        for z in zones + [gid]:
            names.extend(f"{z}/{e}" for e in panel.expert_names)
            blocks.append(panel.values(z))
        values = np.vstack(blocks)
        preds = _scalar_online(names, values, y_norm[gid], config.loss_mode, trace, "main")
        forecast = preds * scale[gid]
    elif config.kind == "vectorial":
        coords = zones + [gid]
        cube = np.stack([panel.values(z) for z in coords], axis=2)  # (E, T, K+1)
        state = None
        preds = np.empty(T)
        active_prev: set = set()
        for t in range(T):
            finite = np.isfinite(cube[:, t, :]).all(axis=1)
            active = [n for n, ok in zip(panel.expert_names, finite) if ok]
            gone = active_prev - set(active)
            if gone:
                raise DataError(f"vectorial: expert stream(s) {sorted(gone)} vanished at step {t}")
            if not active:
                raise DataError(f"vectorial: no experts available at step {t}")
            if state is None:
                state = MlPolyState.fresh(active, loss_mode=config.loss_mode)
            else:
                state = state.expanded(active)
            eidx = [panel.expert_names.index(n) for n in state.names]
            F = cube[eidx, t, :]
            yv = np.array([y_norm[z][t] for z in coords])
            trace.add(t, "main", state.names, state.weights())
            pv, state = mlpoly_vector_step(state, F, yv)
            preds[t] = pv[-1]  # global coordinate
            active_prev = set(active)
        forecast = preds * scale[gid]
    elif config.kind in ("hierarchical_scaled", "hierarchical_unscaled"):
        inner_preds = {}
        for z in zones:
            names = [f"{z}/{e}" for e in panel.expert_names]
            inner_preds[z] = _scalar_online(
                names, panel.values(z), y_norm[z], config.loss_mode, trace, f"zone:{z}"
            )
        if config.kind == "hierarchical_scaled":
            names = [f"inner:{z}" for z in zones] + [f"{gid}/{e}" for e in panel.expert_names]
            values = np.vstack([np.vstack([inner_preds[z] for z in zones]), panel.values(gid)])
            preds = _scalar_online(names, values, y_norm[gid], config.loss_mode, trace, "main")
            forecast = preds * scale[gid]
        else:
            rows = np.vstack([inner_preds[z] * scale[z] for z in zones])
            zone_forecasts = {z: rows[i] for i, z in enumerate(zones)}
            forecast = rows.sum(axis=0)
            preds = forecast / scale[gid]
    else:  # pragma: no cover
        raise ValueError(config.kind)

    return StrategyResult(
        strategy=config.kind,
        timestamps=ts,
        forecast=forecast,
        normalized=preds,
        weights=trace.frame(config.kind, ts),
        zone_forecasts=zone_forecasts,
    )


def replay_forecast(config: StrategyConfig, panel, weights: pd.DataFrame, table) -> np.ndarray:
    """Recompute the forecast stream from a persisted weight trace.

    Weights are combined with the panel values in the trace's stored
    expert order, reproducing the original stream bit for bit.
    """
    zones = list(config.zones) if config.zones is not None else list(panel.zone_ids)
    gid = panel.global_id
    ts = panel.timestamps
    T = len(ts)
    scale = {z: table.scale_for(z, ts, panel.step) for z in zones + [gid]}

    lookup = {}
    for z in zones + [gid]:
        vals = panel.values(z)
        for i, e in enumerate(panel.expert_names):
            lookup[f"{z}/{e}"] = vals[i]

    def layer_preds(layer) -> np.ndarray:
        sub = weights[weights["layer"] == layer]
        preds = np.empty(T)
        for step, grp in sub.groupby("step", sort=True):
            names = grp["expert"].tolist()
            w = grp["weight"].to_numpy()
            f = np.array([lookup[n][int(step)] for n in names])
            preds[int(step)] = float(w @ f)
        return preds

    if not zones or config.kind == "full_disaggregated":
        return layer_preds("main") * scale[gid]
    if config.kind == "vectorial":
        coords = zones + [gid]
        cube = {}
        for i, e in enumerate(panel.expert_names):
            cube[e] = np.stack([panel.values(z)[i] for z in coords], axis=1)  # (T, K+1)
        sub = weights[weights["layer"] == "main"]
        preds = np.empty(T)
        for step, grp in sub.groupby("step", sort=True):
            names = grp["expert"].tolist()
            w = grp["weight"].to_numpy()
            F = np.stack([cube[n][int(step)] for n in names])
            preds[int(step)] = float((F.T @ w)[-1])
        return preds * scale[gid]
    inner = {z: layer_preds(f"zone:{z}") for z in zones}
    if config.kind == "hierarchical_unscaled":
        rows = np.vstack([inner[z] * scale[z] for z in zones])
        return rows.sum(axis=0)
    for z in zones:
        lookup[f"inner:{z}"] = inner[z]
    return layer_preds("main") * scale[gid]
