"""Bagged CART regression forests with conditional-quantile readout.

Split decisions are made on each tree's bootstrap sample; afterwards the
whole training set is dropped down every tree, and the per-leaf row
lists feed both the mean prediction (leaf means) and the Meinshausen
weighted-quantile readout. Mean predictions therefore always stay inside
the convex hull of the training targets, and quantile predictions are
members of the training target multiset.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import _tree
from .errors import DataError

__all__ = [
    "ForestConfig",
    "QuantileForest",
    "ImportanceReport",
    "fit_forest",
    "predict_mean",
    "predict_quantile",
    "permutation_importance",
]

MAX_CAT_LEVELS = 64  # split masks are 64-bit


@dataclass(frozen=True)
class ForestConfig:
    """Forest hyperparameters (ranger-style defaults).

    mtry=None means ceil(sqrt(p)). min_node_size is the minimum rows per
    child: nodes smaller than twice this become leaves. max_depth=None
    grows unlimited-depth trees. The bootstrap draws n rows with
    replacement per tree, and tree t reseeds its generator with
    seed XOR t, so builds are reproducible in any execution order.
    """

    n_trees: int = 500
    mtry: int | None = None
    min_node_size: int = 5
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")


def _encode(df: pd.DataFrame, feature_names, cat_levels) -> np.ndarray:
    cols = []
    for name in feature_names:
        if name not in df.columns:
            raise DataError(f"missing forest covariate {name!r}")
        col = df[name]
        levels = cat_levels[name]
        if levels is not None:
            codes = pd.Categorical(col, categories=levels).codes.astype(np.float64)
            # unseen levels get code -1 and are routed right at every split
            cols.append(codes)
        else:
            x = col.to_numpy(dtype=float)
            if np.isnan(x).any():
                raise DataError(f"missing values in forest covariate {name!r}")
            cols.append(x)
    return np.column_stack(cols) if cols else np.empty((len(df), 0))


class QuantileForest:
    """Fitted forest; immutable after fit."""

    def __init__(self, config, target, feature_names, cat_levels, arrays, y, n_nodes_per_tree):
        self.config = config
        self.target = target
        self.feature_names = list(feature_names)
        self.cat_levels = cat_levels  # name -> list of levels, None for numeric
        self._a = arrays  # dict of concatenated node arrays
        self.y_train = y
        self.train_min = float(y.min())
        self.train_max = float(y.max())
        self.n_nodes_per_tree = n_nodes_per_tree
        self._y_order = np.argsort(y, kind="stable")
        self._y_sorted = y[self._y_order]

    def encode(self, frame) -> np.ndarray:
        df = frame.data if hasattr(frame, "data") else frame
        return _encode(df, self.feature_names, self.cat_levels)

    @property
    def is_cat(self) -> np.ndarray:
        return np.array([1 if self.cat_levels[n] is not None else 0 for n in self.feature_names], dtype=np.uint8)

    @property
    def n_trees(self) -> int:
        return self.config.n_trees

    def inbag(self, t: int) -> np.ndarray:
        n = self.y_train.shape[0]
        return self._a["inbag"][t * n : (t + 1) * n]

    def _apply(self, X: np.ndarray) -> np.ndarray:
        return _tree.forest_apply(
            X,
            self._a["node_off"],
            self._a["feature"],
            self._a["threshold"],
            self._a["cat_mask"],
            self._a["left"],
            self._a["right"],
            self.is_cat,
        )

    def predict_mean(self, frame) -> np.ndarray:
        X = self.encode(frame)
        leaves = self._apply(X)
        return _tree.predict_mean_kernel(leaves, self._a["node_off"], self._a["leaf_value"])

    def weights(self, frame) -> np.ndarray:
        """Meinshausen training-row weights per query row."""
        X = self.encode(frame)
        leaves = self._apply(X)
        return _tree.meinshausen_weights(
            leaves,
            self._a["node_off"],
            self._a["rows_start"],
            self._a["rows_count"],
            self._a["rows_all"],
            self.y_train.shape[0],
        )

    def predict_quantile(self, frame, q) -> np.ndarray:
        qs = np.atleast_1d(np.asarray(q, dtype=float))
        if ((qs <= 0) | (qs >= 1)).any():
            raise ValueError(f"quantile levels must lie in (0,1), got {qs}")
        W = self.weights(frame)
        out = _tree.weighted_quantiles(W, self._y_order, self._y_sorted, qs)
        return out[0] if np.isscalar(q) or np.ndim(q) == 0 else out

    # -- serialization ------------------------------------------------------

    def save(self, path):
        header = {
            "version": 1,
            "config": {
                "n_trees": self.config.n_trees,
                "mtry": self.config.mtry,
                "min_node_size": self.config.min_node_size,
                "max_depth": self.config.max_depth,
                "seed": self.config.seed,
            },
            "target": self.target,
            "feature_names": self.feature_names,
            "cat_levels": {k: v for k, v in self.cat_levels.items()},
        }
        np.savez_compressed(
            path,
            header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
            y=self.y_train,
            n_nodes=self.n_nodes_per_tree,
            **self._a,
        )

    @classmethod
    def load(cls, path) -> "QuantileForest":
        with np.load(path if str(path).endswith(".npz") else str(path) + ".npz") as z:
            header = json.loads(bytes(z["header"]).decode())
            arrays = {
                k: z[k]
                for k in (
                    "node_off",
                    "feature",
                    "threshold",
                    "cat_mask",
                    "left",
                    "right",
                    "leaf_value",
                    "rows_start",
                    "rows_count",
                    "rows_all",
                    "inbag",
                )
            }
            y = z["y"]
            n_nodes = z["n_nodes"]
        cfg = ForestConfig(**header["config"])
        return cls(cfg, header["target"], header["feature_names"], header["cat_levels"], arrays, y, n_nodes)


def _training_table(frame, target, features):
    if hasattr(frame, "data"):
        df = frame.data.loc[frame.usable]
    else:
        df = frame
    if target not in df.columns:
        raise DataError(f"missing target column {target!r}")
    feats = [c for c in df.columns if c != target] if features is None else list(features)
    return df, feats


def fit_forest(frame, target: str, config: ForestConfig = ForestConfig(), features=None) -> QuantileForest:
    """Fit a bagged CART forest predicting `target` from the other columns."""
    df, feats = _training_table(frame, target, features)
    if len(feats) < 1:
        raise DataError("forest needs at least one covariate")
    y = df[target].to_numpy(dtype=float)
    n = len(y)
    if n < 2:
        raise DataError("forest needs at least 2 rows")
    if n < 2 * config.min_node_size:
        raise DataError(f"forest needs n >= {2 * config.min_node_size} rows, got {n}")
    if np.isnan(y).any():
        raise DataError(f"missing values in target {target!r}")

    cat_levels = {}
    for name in feats:
        col = df[name]
        if isinstance(col.dtype, pd.CategoricalDtype):
            levels = list(col.cat.categories)
            if len(levels) > MAX_CAT_LEVELS:
                raise DataError(f"categorical {name!r} has {len(levels)} levels (max {MAX_CAT_LEVELS})")
            cat_levels[name] = levels
        else:
            cat_levels[name] = None

    p = len(feats)
    mtry = config.mtry if config.mtry is not None else int(np.ceil(np.sqrt(p)))
    if not 1 <= mtry <= p:
        raise ValueError(f"mtry must lie in [1, {p}], got {mtry}")
    max_depth = -1 if config.max_depth is None else int(config.max_depth)

    X = _encode(df, feats, cat_levels)
    is_cat = np.array([1 if cat_levels[n] is not None else 0 for n in feats], dtype=np.uint8)

    T = config.n_trees
    max_nodes = 2 * n + 1
    feat_buf = np.empty(max_nodes, np.int32)
    thr_buf = np.empty(max_nodes, np.float64)
    mask_buf = np.empty(max_nodes, np.uint64)
    left_buf = np.empty(max_nodes, np.int32)
    right_buf = np.empty(max_nodes, np.int32)

    features_l, thresholds_l, masks_l, lefts_l, rights_l = [], [], [], [], []
    inbag_all = np.empty(T * n, np.int32)
    n_nodes_per_tree = np.empty(T, np.int64)
    for t in range(T):
        tree_seed = np.uint32(np.uint32(config.seed) ^ np.uint32(t))
        n_nodes, inbag = _tree.grow_tree(
            X, y, is_cat, tree_seed, mtry, config.min_node_size, max_depth,
            feat_buf, thr_buf, mask_buf, left_buf, right_buf,
        )
        n_nodes_per_tree[t] = n_nodes
        inbag_all[t * n : (t + 1) * n] = inbag
        features_l.append(feat_buf[:n_nodes].copy())
        thresholds_l.append(thr_buf[:n_nodes].copy())
        masks_l.append(mask_buf[:n_nodes].copy())
        lefts_l.append(left_buf[:n_nodes].copy())
        rights_l.append(right_buf[:n_nodes].copy())

    node_off = np.zeros(T + 1, np.int64)
    node_off[1:] = np.cumsum(n_nodes_per_tree)
    arrays = {
        "node_off": node_off,
        "feature": np.concatenate(features_l),
        "threshold": np.concatenate(thresholds_l),
        "cat_mask": np.concatenate(masks_l),
        "left": np.concatenate(lefts_l),
        "right": np.concatenate(rights_l),
        "inbag": inbag_all,
    }

    # populate every leaf with the full training set
    total_nodes = int(node_off[-1])
    leaf_value = np.zeros(total_nodes)
    rows_start = np.zeros(total_nodes, np.int64)
    rows_count = np.zeros(total_nodes, np.int64)
    rows_all = np.empty(T * n, np.int32)
    leaves = _tree.forest_apply(
        X, node_off, arrays["feature"], arrays["threshold"], arrays["cat_mask"],
        arrays["left"], arrays["right"], is_cat,
    )
    for t in range(T):
        o = int(node_off[t])
        nn = int(n_nodes_per_tree[t])
        lv = leaves[t]
        order = np.argsort(lv, kind="stable")
        rows_all[t * n : (t + 1) * n] = order.astype(np.int32)
        counts = np.bincount(lv, minlength=nn)
        sums = np.bincount(lv, weights=y, minlength=nn)
        starts = t * n + np.concatenate(([0], np.cumsum(counts)[:-1]))
        rows_start[o : o + nn] = starts
        rows_count[o : o + nn] = counts
        with np.errstate(invalid="ignore"):
            vals = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        leaf_value[o : o + nn] = vals

    arrays["leaf_value"] = leaf_value
    arrays["rows_start"] = rows_start
    arrays["rows_count"] = rows_count
    arrays["rows_all"] = rows_all

    return QuantileForest(config, target, feats, cat_levels, arrays, y, n_nodes_per_tree)


def predict_mean(forest: QuantileForest, rows) -> np.ndarray:
    return forest.predict_mean(rows)


def predict_quantile(forest: QuantileForest, rows, q) -> np.ndarray:
    return forest.predict_quantile(rows, q)


# ---------------------------------------------------------------------------
# permutation importance
# ---------------------------------------------------------------------------

@dataclass
class ImportanceReport:
    """Permutation importances, normalized to sum to 100."""

    variables: list
    raw: np.ndarray
    normalized: np.ndarray
    loss: str
    window: str = ""
    clamped: list = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"variable": self.variables, "raw": self.raw, "normalized": self.normalized}
        )

    def ranked(self) -> list:
        order = np.argsort(-self.normalized, kind="stable")
        return [self.variables[i] for i in order]


def _loss_fn(loss, y, pred, q=None):
    if loss == "squared":
        d = y - pred
        return float(np.mean(d * d))
    # pinball
    d = y - pred
    return float(np.mean(np.where(d >= 0, q * d, (q - 1) * d)))


def permutation_importance(forest: QuantileForest, frame, loss="squared", seed: int = 0, window: str = "") -> ImportanceReport:
    """Permute each covariate (seeded) and record the loss increase.

    loss is "squared" (mean readout) or ("pinball", q) (quantile readout).
    Negative raw importances clamp to zero before normalizing; when every
    raw value is zero the mass spreads uniformly so reports always sum
    to 100.
    """
    df = frame.data.loc[frame.usable] if hasattr(frame, "data") else frame
    if len(df) == 0:
        raise DataError("empty evaluation frame")
    if isinstance(loss, tuple):
        kind, q = loss
        if kind != "pinball":
            raise ValueError(f"unknown loss {loss!r}")
        predict = lambda d: forest.predict_quantile(d, q)
        loss_label = f"pinball({q})"
    else:
        if loss != "squared":
            raise ValueError(f"unknown loss {loss!r}")
        kind, q = "squared", None
        predict = forest.predict_mean
        loss_label = "squared"

    if forest.target not in df.columns:
        raise DataError(f"evaluation frame lacks target column {forest.target!r}")
    y = df[forest.target].to_numpy(dtype=float)

    base = _loss_fn(kind, y, predict(df), q)
    rng = np.random.default_rng(seed)
    raw = np.empty(len(forest.feature_names))
    for i, name in enumerate(forest.feature_names):
        perm = rng.permutation(len(df))
        shuffled = df.copy()
        shuffled[name] = df[name].to_numpy()[perm]
        raw[i] = _loss_fn(kind, y, predict(shuffled), q) - base

    clamped = [forest.feature_names[i] for i in np.nonzero(raw < 0)[0]]
    nonneg = np.clip(raw, 0.0, None)
    total = nonneg.sum()
    if total > 0:
        normalized = 100.0 * nonneg / total
    else:
        normalized = np.full_like(nonneg, 100.0 / len(nonneg))
    return ImportanceReport(
        variables=list(forest.feature_names),
        raw=raw,
        normalized=normalized,
        loss=loss_label,
        window=window,
        clamped=clamped,
    )
