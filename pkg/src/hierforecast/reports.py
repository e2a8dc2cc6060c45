"""Run-artifact emission: CSVs, text tables, and rendered figures.

Every table the toolkit produces lands as a delimited file; figures are
rendered from the same data next to them under figures/. Emission is a
pure function of the artifacts, so re-emitting a run yields identical
bytes.
"""
from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend pinned above)
import numpy as np
import pandas as pd

from .pipelines import RunArtifacts

__all__ = ["emit_reports", "render_figures", "metrics_text"]


def _write_csv(df: pd.DataFrame, path) -> str:
    df.to_csv(path, index=False)
    return str(path)


def metrics_text(metrics: pd.DataFrame) -> str:
    """Pretty error table: models as rows, evaluation windows as columns."""
    if metrics.empty:
        return "(no metrics)\n"
    if "n_covariates" in metrics.columns:
        models = list(metrics["model"])
        lines = ["model            " + "".join(f"{m:>16}" for m in models)]
        for row_name, fmt in (("RMSE", "{:.1f}"), ("MAPE %", "{:.3f}"), ("Nb covariates", "{:d}")):
            key = {"RMSE": "rmse", "MAPE %": "mape_pct", "Nb covariates": "n_covariates"}[row_name]
            cells = "".join(f"{fmt.format(v):>16}" for v in metrics[key])
            lines.append(f"{row_name:<17}" + cells)
        return "\n".join(lines) + "\n"

    periods = list(dict.fromkeys(metrics["period"]))
    models = list(dict.fromkeys(metrics["model"]))
    width = max(len(m) for m in models) + 2
    header = " " * width + "".join(f"{p:>26}" for p in periods)
    lines = [header]
    by_key = {(r["model"], r["period"]): r for _, r in metrics.iterrows()}
    for m in models:
        cells = []
        for p in periods:
            r = by_key.get((m, p))
            if r is None or not np.isfinite(r["mape_pct"]):
                cells.append(f"{'n/a':>26}")
            else:
                cells.append(f"{r['mape_pct']:>14.2f}% {r['rmse']:>9.1f}")
        lines.append(f"{m:<{width}}" + "".join(cells))
    lines.append("(cells: MAPE %  RMSE)")
    return "\n".join(lines) + "\n"


def emit_reports(artifacts: RunArtifacts, out_dir, figures: bool = True) -> list:
    """Write every artifact under out_dir; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(artifacts.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(manifest_path)

    written.append(_write_csv(artifacts.metrics, os.path.join(out_dir, "metrics.csv")))
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        fh.write(metrics_text(artifacts.metrics))
    written.append(os.path.join(out_dir, "metrics.txt"))

    written.append(_write_csv(artifacts.forecasts, os.path.join(out_dir, "forecasts.csv")))

    if artifacts.weights is not None:
        written.append(_write_csv(artifacts.weights, os.path.join(out_dir, "weights.csv")))
    if artifacts.panel is not None:
        written.append(_write_csv(artifacts.panel.to_frame(), os.path.join(out_dir, "panel.csv")))
    for name, rep in artifacts.importance.items():
        written.append(_write_csv(rep.to_frame(), os.path.join(out_dir, f"importance_{name}.csv")))
    for var, curve in artifacts.ale_curves.items():
        written.append(_write_csv(curve.to_frame(), os.path.join(out_dir, f"ale_{var}.csv")))
    if artifacts.models:
        models_path = os.path.join(out_dir, "models.json")
        with open(models_path, "w") as fh:
            json.dump(artifacts.models, fh, sort_keys=True)
        written.append(models_path)

    if figures:
        written.extend(render_figures(out_dir))
    return written


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def _save(fig, path, written):
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)


def _fig_forecasts(df: pd.DataFrame, path, written):
    if df.empty:
        return
    df = df.copy()
    df["timestamp"] = pd.to_datetime(df["timestamp"])
    series_col = "strategy" if "strategy" in df.columns else "model"
    wide = df.pivot_table(index="timestamp", columns=series_col, values="forecast_MW", aggfunc="first")
    fig, ax = plt.subplots(figsize=(11, 4.5))
    for col in wide.columns:
        style = {"lw": 1.6, "color": "black"} if col == "actual" else {"lw": 0.9, "alpha": 0.85}
        ax.plot(wide.index, wide[col], label=col, **style)
    ax.set_ylabel("load (MW)")
    ax.legend(loc="upper left", fontsize=8, ncol=2)
    ax.set_title("forecasts vs actual")
    fig.autofmt_xdate()
    fig.tight_layout()
    _save(fig, path, written)


def _fig_weights(df: pd.DataFrame, out_dir, written):
    if df.empty:
        return
    for strategy, sub in df.groupby("strategy", sort=True):
        main = sub[sub["layer"] == "main"]
        if main.empty:
            continue
        wide = main.pivot_table(index="step", columns="expert", values="weight", aggfunc="first").fillna(0.0)
        fig, ax = plt.subplots(figsize=(11, 4))
        ax.stackplot(wide.index, [wide[c].to_numpy() for c in wide.columns], labels=list(wide.columns), lw=0)
        ax.set_ylim(0, 1)
        ax.set_ylabel("weight")
        ax.set_xlabel("step")
        ax.set_title(f"expert weights: {strategy}")
        if wide.shape[1] <= 16:
            ax.legend(loc="upper right", fontsize=7, ncol=2)
        fig.tight_layout()
        _save(fig, os.path.join(out_dir, f"weights_{strategy}.png"), written)


def _fig_importance(df: pd.DataFrame, name, path, written):
    if df.empty:
        return
    top = df.sort_values("normalized", ascending=True).tail(20)
    fig, ax = plt.subplots(figsize=(7, max(3, 0.3 * len(top))))
    ax.barh(top["variable"], top["normalized"])
    ax.set_xlabel("normalized importance (sums to 100)")
    ax.set_title(f"permutation importance: {name}")
    fig.tight_layout()
    _save(fig, path, written)


def _fig_ale(df: pd.DataFrame, var, path, written):
    if df.empty:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(df["bin_center"], df["effect"], marker="o", ms=3)
    ax.axhline(0.0, color="grey", lw=0.6)
    ax.set_xlabel(var)
    ax.set_ylabel("accumulated local effect")
    ax.set_title(f"ALE: {var}")
    fig.tight_layout()
    _save(fig, path, written)


def render_figures(run_dir) -> list:
    """Render figures from the delimited outputs already in run_dir."""
    fig_dir = os.path.join(run_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    written = []

    fc_path = os.path.join(run_dir, "forecasts.csv")
    if os.path.exists(fc_path):
        _fig_forecasts(pd.read_csv(fc_path), os.path.join(fig_dir, "forecasts.png"), written)
    w_path = os.path.join(run_dir, "weights.csv")
    if os.path.exists(w_path):
        _fig_weights(pd.read_csv(w_path), fig_dir, written)
    for fn in sorted(os.listdir(run_dir)):
        if fn.startswith("importance_") and fn.endswith(".csv"):
            name = fn[len("importance_") : -len(".csv")]
            _fig_importance(pd.read_csv(os.path.join(run_dir, fn)),
                            name, os.path.join(fig_dir, f"importance_{name}.png"), written)
        if fn.startswith("ale_") and fn.endswith(".csv"):
            var = fn[len("ale_") : -len(".csv")]
            _fig_ale(pd.read_csv(os.path.join(run_dir, fn)),
                     var, os.path.join(fig_dir, f"ale_{var}.png"), written)
    return written
