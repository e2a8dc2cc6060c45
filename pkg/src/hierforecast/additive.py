"""Penalized-spline partially linear additive models.

The response is modeled as intercept + linear/categorical terms + a sum
of smooth spline terms. Smooth blocks carry second-order difference
penalties; per-term smoothing weights come from a GCV grid search with
one cyclic coordinate pass. Every non-parametric block is column
centered and sum-to-zero constrained, so each fitted smooth averages to
zero over the training rows and the intercept equals the training mean.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, DataError, NumericalError
from .splines import (
    CyclicSplineBasis,
    SplineBasis,
    basis_from_dict,
    sum_zero_basis,
)

__all__ = [
    "TermSpec",
    "AdditiveModel",
    "EffectFunction",
    "parse_formula",
    "fit",
    "predict",
    "extract_effects",
]

GCV_GRID = 10.0 ** np.arange(-4.0, 5.0)  # 9 log-spaced smoothing weights
NULLSPACE_RIDGE = 1e-7  # keeps nested penalty-free directions identifiable


@dataclass(frozen=True)
class TermSpec:
    """One term of the additive formula.

    kind: "categorical" | "linear" | "smooth" | "tensor".
    by: categorical factor producing one smooth copy per level.
    by_cat: categorical interacting with a linear term (one slope per level).
    """

    kind: str
    names: tuple
    k: tuple = ()
    cyclic: bool = False
    by: str | None = None
    by_cat: str | None = None

    @property
    def label(self) -> str:
        if self.kind == "categorical":
            return f"cat({self.names[0]})"
        if self.kind == "linear":
            if self.by_cat:
                return f"lin({self.names[0]}):cat({self.by_cat})"
            return f"lin({self.names[0]})"
        if self.kind == "smooth":
            return f"s({self.names[0]})"
        return f"te({self.names[0]},{self.names[1]})"


_TERM_RES = [
    (re.compile(r"^cat\(\s*([A-Za-z_][\w.]*)\s*\)$"), "categorical"),
    (re.compile(r"^lin\(\s*([A-Za-z_][\w.]*)\s*\)$"), "linear"),
    (re.compile(r"^lin\(\s*([A-Za-z_][\w.]*)\s*\)\s*:\s*cat\(\s*([A-Za-z_][\w.]*)\s*\)$"), "linear_by"),
]


def _parse_smooth(body: str) -> TermSpec:
    parts = [p.strip() for p in body.split(",")]
    name = parts[0]
    k = None
    cyclic = False
    by = None
    for p in parts[1:]:
        if p == "cyclic":
            cyclic = True
        elif m := re.match(r"^k\s*=\s*(\d+)$", p):
            k = int(m.group(1))
        elif m := re.match(r"^by\s*=\s*([A-Za-z_][\w.]*)$", p):
            by = m.group(1)
        else:
            raise ConfigError(f"unknown smooth argument {p!r}")
    if k is None:
        raise ConfigError(f"s({body}): missing k=")
    if k < 4:
        raise ConfigError(f"s({body}): cubic smooths need k >= 4")
    return TermSpec(kind="smooth", names=(name,), k=(k,), cyclic=cyclic, by=by)


def _parse_tensor(body: str) -> TermSpec:
    m = re.match(
        r"^([A-Za-z_][\w.]*)\s*,\s*([A-Za-z_][\w.]*)\s*,\s*k\s*=\s*(\d+)\s*,\s*(\d+)$",
        body.strip(),
    )
    if not m:
        raise ConfigError(f"te({body}): expected te(NAME, NAME, k=INT, INT)")
    k1, k2 = int(m.group(3)), int(m.group(4))
    if min(k1, k2) < 4:
        raise ConfigError(f"te({body}): cubic marginals need k >= 4")
    return TermSpec(kind="tensor", names=(m.group(1), m.group(2)), k=(k1, k2))


def parse_formula(formula: str):
    """Parse `target ~ term + term + ...` into (target, [TermSpec])."""
    if "~" not in formula:
        raise ConfigError(f"formula {formula!r} lacks '~'")
    target, rhs = formula.split("~", 1)
    target = target.strip()
    terms = []
    depth = 0
    token = ""
    for ch in rhs + "+":
        if ch == "+" and depth == 0:
            if token.strip():
                terms.append(_parse_token(token.strip()))
            token = ""
            continue
        depth += ch == "("
        depth -= ch == ")"
        token += ch
    if depth != 0:
        raise ConfigError(f"unbalanced parentheses in formula {formula!r}")
    if not terms:
        raise ConfigError(f"formula {formula!r} has no terms")
    return target, terms


def _parse_token(token: str) -> TermSpec:
    for rex, kind in _TERM_RES:
        if m := rex.match(token):
            if kind == "categorical":
                return TermSpec(kind="categorical", names=(m.group(1),))
            if kind == "linear":
                return TermSpec(kind="linear", names=(m.group(1),))
            return TermSpec(kind="linear", names=(m.group(1),), by_cat=m.group(2))
    if m := re.match(r"^s\((.*)\)$", token):
        return _parse_smooth(m.group(1))
    if m := re.match(r"^te\((.*)\)$", token):
        return _parse_tensor(m.group(1))
    raise ConfigError(f"unknown formula token {token!r}")


# ---------------------------------------------------------------------------
# fitted terms
# ---------------------------------------------------------------------------

_nullspace_basis = sum_zero_basis


def _column(df: pd.DataFrame, name: str) -> pd.Series:
    if name not in df.columns:
        raise DataError(f"missing column {name!r}")
    return df[name]


def _numeric(df: pd.DataFrame, name: str) -> np.ndarray:
    col = _column(df, name)
    x = col.to_numpy(dtype=float)
    if np.isnan(x).any():
        raise DataError(f"missing values in column {name!r}")
    return x


def _codes(df: pd.DataFrame, name: str, levels) -> np.ndarray:
    col = _column(df, name)
    if isinstance(col.dtype, pd.CategoricalDtype):
        values = col.to_numpy()
    else:
        values = col.to_numpy()
    codes = pd.Categorical(values, categories=levels).codes
    if (codes < 0).any():
        seen = sorted(set(np.asarray(values)[codes < 0].tolist()))
        raise DataError(f"column {name!r}: levels {seen} unseen at fit time")
    return codes.astype(np.int64)


def _declared_levels(df: pd.DataFrame, name: str):
    """Declared level order restricted to levels present in the fit data;
    levels never seen at fit time stay refusable at predict time."""
    col = _column(df, name)
    if isinstance(col.dtype, pd.CategoricalDtype):
        present = set(col.cat.codes.to_numpy())
        return [l for i, l in enumerate(col.cat.categories) if i in present]
    return sorted(pd.unique(col).tolist())


class _Term:
    """Fitted-term base: a centered design block plus optional penalty."""

    spec: TermSpec
    coefs: np.ndarray | None = None

    @property
    def label(self) -> str:
        return self.spec.label

    @property
    def penalized(self) -> bool:
        return False

    def penalty(self):
        return None

    def contribution(self, df: pd.DataFrame) -> np.ndarray:
        return self.design(df) @ self.coefs


class _CategoricalTerm(_Term):
    def __init__(self, spec: TermSpec, df: pd.DataFrame):
        self.spec = spec
        self.levels = _declared_levels(df, spec.names[0])
        if len(self.levels) < 2:
            raise DataError(f"{spec.label}: needs at least 2 levels")
        self.centering = None  # set on first (training) design build

    def _raw(self, df: pd.DataFrame) -> np.ndarray:
        codes = _codes(df, self.spec.names[0], self.levels)
        L = len(self.levels)
        E = np.zeros((len(codes), L - 1))
        front = codes < L - 1
        E[np.arange(len(codes))[front], codes[front]] = 1.0
        E[codes == L - 1, :] = -1.0
        return E

    def design(self, df: pd.DataFrame) -> np.ndarray:
        E = self._raw(df)
        if self.centering is None:
            self.centering = E.mean(axis=0)
        return E - self.centering

    def level_effects(self) -> dict:
        """Fitted effect for every level (contribution before centering shift)."""
        L = len(self.levels)
        rows = np.vstack([np.eye(L - 1), -np.ones(L - 1)]) - self.centering
        vals = rows @ self.coefs
        return dict(zip(self.levels, vals))

    @property
    def n_coefs(self) -> int:
        return len(self.levels) - 1

    def to_dict(self) -> dict:
        return {
            "levels": [_jsonable(l) for l in self.levels],
            "centering": self.centering.tolist(),
            "coefs": self.coefs.tolist(),
        }


class _LinearTerm(_Term):
    def __init__(self, spec: TermSpec, df: pd.DataFrame):
        self.spec = spec
        self.levels = _declared_levels(df, spec.by_cat) if spec.by_cat else None
        self.centering = None

    def _raw(self, df: pd.DataFrame) -> np.ndarray:
        x = _numeric(df, self.spec.names[0])
        if self.levels is None:
            return x[:, None]
        codes = _codes(df, self.spec.by_cat, self.levels)
        X = np.zeros((len(x), len(self.levels)))
        X[np.arange(len(x)), codes] = x
        return X

    def design(self, df: pd.DataFrame) -> np.ndarray:
        X = self._raw(df)
        if self.centering is None:
            self.centering = X.mean(axis=0)
        return X - self.centering

    @property
    def n_coefs(self) -> int:
        return 1 if self.levels is None else len(self.levels)

    def slopes(self):
        if self.levels is None:
            return float(self.coefs[0])
        return dict(zip(self.levels, self.coefs))

    def to_dict(self) -> dict:
        return {
            "levels": None if self.levels is None else [_jsonable(l) for l in self.levels],
            "centering": self.centering.tolist(),
            "coefs": self.coefs.tolist(),
        }


class _SmoothTerm(_Term):
    def __init__(self, spec: TermSpec, df: pd.DataFrame, periods: dict, warnings: list):
        self.spec = spec
        name = spec.names[0]
        x = _numeric(df, name)
        if spec.cyclic:
            period = periods.get(name)
            if period is None:
                raise ConfigError(f"{spec.label}: cyclic smooth needs a declared period for {name!r}")
            k = min(spec.k[0], np.unique(x).size)
            if k < spec.k[0]:
                warnings.append(f"{spec.label}: k reduced {spec.k[0]} -> {k} (too few distinct values)")
            self.basis = CyclicSplineBasis.from_data(x, k=k, period=float(period), origin=0.0)
        else:
            self.basis = SplineBasis.from_data(x, k=spec.k[0])
            if self.basis.n_basis < spec.k[0]:
                warnings.append(
                    f"{spec.label}: k reduced {spec.k[0]} -> {self.basis.n_basis} (too few distinct values)"
                )
        self.by_levels = _declared_levels(df, spec.by) if spec.by else None
        self.Z = _nullspace_basis(self.basis.n_basis)
        self.centering = None  # one vector, or one per by-level

    def _fill_centering(self, B: np.ndarray, df: pd.DataFrame):
        if self.by_levels is None:
            self.centering = B.mean(axis=0)
        else:
            codes = _codes(df, self.spec.by, self.by_levels)
            cents = []
            for l in range(len(self.by_levels)):
                rows = B[codes == l]
                if rows.shape[0] == 0:
                    raise DataError(f"{self.label}: by-level {self.by_levels[l]!r} absent from training data")
                cents.append(rows.mean(axis=0))
            self.centering = np.asarray(cents)

    def design(self, df: pd.DataFrame) -> np.ndarray:
        B = self.basis.design(_numeric(df, self.spec.names[0]))
        if self.centering is None:
            self._fill_centering(B, df)
        if self.by_levels is None:
            return (B - self.centering) @ self.Z
        codes = _codes(df, self.spec.by, self.by_levels)
        return np.hstack([self._level_block(B, codes, l) for l in range(len(self.by_levels))])

    def _level_block(self, B: np.ndarray, codes: np.ndarray, l: int) -> np.ndarray:
        block = (B - self.centering[l]) @ self.Z
        block[codes != l] = 0.0
        return block

    def level_contribution(self, df: pd.DataFrame, l: int) -> np.ndarray:
        """Contribution of one by-level copy (masked rows are exact zeros)."""
        B = self.basis.design(_numeric(df, self.spec.names[0]))
        codes = _codes(df, self.spec.by, self.by_levels)
        d = self.basis.n_basis - 1
        return self._level_block(B, codes, l) @ self.coefs[l * d : (l + 1) * d]

    def contribution(self, df: pd.DataFrame) -> np.ndarray:
        if self.by_levels is None:
            return self.design(df) @ self.coefs
        out = self.level_contribution(df, 0)
        for l in range(1, len(self.by_levels)):
            out = out + self.level_contribution(df, l)
        return out

    @property
    def penalized(self) -> bool:
        return True

    def penalty(self) -> np.ndarray:
        S = self.basis.penalty()
        Sg = self.Z.T @ S @ self.Z
        Sg = Sg + NULLSPACE_RIDGE * (np.trace(Sg) / Sg.shape[0]) * np.eye(Sg.shape[0])
        if self.by_levels is None:
            return Sg
        reps = len(self.by_levels)
        out = np.zeros((reps * Sg.shape[0], reps * Sg.shape[0]))
        for l in range(reps):
            sl = slice(l * Sg.shape[0], (l + 1) * Sg.shape[0])
            out[sl, sl] = Sg
        return out

    @property
    def n_coefs(self) -> int:
        base = self.basis.n_basis - 1
        return base if self.by_levels is None else base * len(self.by_levels)

    def shape_coefs(self):
        """Coefficients mapped back to the full basis (theta = Z @ gamma)."""
        if self.by_levels is None:
            return self.Z @ self.coefs
        d = self.basis.n_basis - 1
        return np.asarray([self.Z @ self.coefs[l * d : (l + 1) * d] for l in range(len(self.by_levels))])

    def to_dict(self) -> dict:
        return {
            "basis": self.basis.to_dict(),
            "by_levels": None if self.by_levels is None else [_jsonable(l) for l in self.by_levels],
            "centering": np.asarray(self.centering).tolist(),
            "coefs": self.coefs.tolist(),
        }


class _TensorTerm(_Term):
    def __init__(self, spec: TermSpec, df: pd.DataFrame, warnings: list):
        self.spec = spec
        x1 = _numeric(df, spec.names[0])
        x2 = _numeric(df, spec.names[1])
        self.basis1 = SplineBasis.from_data(x1, k=spec.k[0])
        self.basis2 = SplineBasis.from_data(x2, k=spec.k[1])
        for want, got, name in ((spec.k[0], self.basis1.n_basis, spec.names[0]), (spec.k[1], self.basis2.n_basis, spec.names[1])):
            if got < want:
                warnings.append(f"{spec.label}: marginal k on {name!r} reduced {want} -> {got}")
        self.Z = _nullspace_basis(self.basis1.n_basis * self.basis2.n_basis)
        self.centering = None

    def _raw(self, df: pd.DataFrame) -> np.ndarray:
        B1 = self.basis1.design(_numeric(df, self.spec.names[0]))
        B2 = self.basis2.design(_numeric(df, self.spec.names[1]))
        return (B1[:, :, None] * B2[:, None, :]).reshape(B1.shape[0], -1)

    def design(self, df: pd.DataFrame) -> np.ndarray:
        P = self._raw(df)
        if self.centering is None:
            self.centering = P.mean(axis=0)
        return (P - self.centering) @ self.Z

    @property
    def penalized(self) -> bool:
        return True

    def penalty(self) -> np.ndarray:
        k1, k2 = self.basis1.n_basis, self.basis2.n_basis
        S = np.kron(self.basis1.penalty(), np.eye(k2)) + np.kron(np.eye(k1), self.basis2.penalty())
        Sg = self.Z.T @ S @ self.Z
        return Sg + NULLSPACE_RIDGE * (np.trace(Sg) / Sg.shape[0]) * np.eye(Sg.shape[0])

    @property
    def n_coefs(self) -> int:
        return self.basis1.n_basis * self.basis2.n_basis - 1

    def shape_coefs(self) -> np.ndarray:
        return self.Z @ self.coefs

    def to_dict(self) -> dict:
        return {
            "basis1": self.basis1.to_dict(),
            "basis2": self.basis2.to_dict(),
            "centering": self.centering.tolist(),
            "coefs": self.coefs.tolist(),
        }


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def _build_term(spec: TermSpec, df: pd.DataFrame, periods: dict, warnings: list) -> _Term:
    if spec.kind == "categorical":
        return _CategoricalTerm(spec, df)
    if spec.kind == "linear":
        return _LinearTerm(spec, df)
    if spec.kind == "smooth":
        return _SmoothTerm(spec, df, periods, warnings)
    if spec.kind == "tensor":
        return _TensorTerm(spec, df, warnings)
    raise ConfigError(f"unknown term kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class AdditiveModel:
    """Fitted partially linear additive model."""

    target: str
    intercept: float
    terms: list
    lambdas: dict
    sigma2: float
    edf: float
    gcv: float
    n_train: int
    ranges: dict
    warnings: list = field(default_factory=list)

    def predict(self, frame) -> np.ndarray:
        df = _as_df(frame)
        out = np.full(len(df), self.intercept)
        for term in self.terms:
            out = out + term.contribution(df)
        return out

    def term_contribution(self, label: str, frame) -> np.ndarray:
        df = _as_df(frame)
        for term in self.terms:
            if term.label == label:
                return term.contribution(df)
        raise ValueError(f"unknown term {label!r}")

    def term_labels(self) -> list:
        return [t.label for t in self.terms]

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "AdditiveModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "target": self.target,
            "intercept": self.intercept,
            "sigma2": self.sigma2,
            "edf": self.edf,
            "gcv": self.gcv,
            "n_train": self.n_train,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "lambdas": self.lambdas,
            "warnings": self.warnings,
            "terms": [
                {"spec": _spec_dict(t.spec), "state": t.to_dict()} for t in self.terms
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdditiveModel":
        terms = [_term_from_dict(td) for td in d["terms"]]
        return cls(
            target=d["target"],
            intercept=d["intercept"],
            terms=terms,
            lambdas=d["lambdas"],
            sigma2=d["sigma2"],
            edf=d["edf"],
            gcv=d["gcv"],
            n_train=d["n_train"],
            ranges={k: tuple(v) for k, v in d["ranges"].items()},
            warnings=list(d.get("warnings", [])),
        )


def _spec_dict(spec: TermSpec) -> dict:
    return {
        "kind": spec.kind,
        "names": list(spec.names),
        "k": list(spec.k),
        "cyclic": spec.cyclic,
        "by": spec.by,
        "by_cat": spec.by_cat,
    }


def _term_from_dict(td: dict) -> _Term:
    spec = TermSpec(
        kind=td["spec"]["kind"],
        names=tuple(td["spec"]["names"]),
        k=tuple(td["spec"]["k"]),
        cyclic=td["spec"]["cyclic"],
        by=td["spec"]["by"],
        by_cat=td["spec"]["by_cat"],
    )
    st = td["state"]
    term = object.__new__(
        {
            "categorical": _CategoricalTerm,
            "linear": _LinearTerm,
            "smooth": _SmoothTerm,
            "tensor": _TensorTerm,
        }[spec.kind]
    )
    term.spec = spec
    if spec.kind == "categorical":
        term.levels = st["levels"]
        term.centering = np.asarray(st["centering"])
    elif spec.kind == "linear":
        term.levels = st["levels"]
        term.centering = np.asarray(st["centering"])
    elif spec.kind == "smooth":
        term.basis = basis_from_dict(st["basis"])
        term.by_levels = st["by_levels"]
        term.centering = np.asarray(st["centering"])
        term.Z = _nullspace_basis(term.basis.n_basis)
    else:
        term.basis1 = basis_from_dict(st["basis1"])
        term.basis2 = basis_from_dict(st["basis2"])
        term.centering = np.asarray(st["centering"])
        term.Z = _nullspace_basis(term.basis1.n_basis * term.basis2.n_basis)
    term.coefs = np.asarray(st["coefs"])
    return term


def _as_df(frame) -> pd.DataFrame:
    if isinstance(frame, pd.DataFrame):
        return frame
    return frame.data  # SeriesFrame


def _usable_df(frame):
    if isinstance(frame, pd.DataFrame):
        return frame
    return frame.data.loc[frame.usable]


def fit(formula, frame, lambda_policy="gcv", ridge: float = 0.0) -> AdditiveModel:
    """Fit the additive model.

    formula: `target ~ ...` string or (target, [TermSpec]) pair.
    lambda_policy: "gcv" (grid search, one coordinate pass), a scalar
    applied to every penalized term, or {term_label: value}.
    ridge: optional diagonal stabilizer (relative to the Gram diagonal)
    for automated refits whose folds may lose a level or a variance;
    interactive fits should leave it at 0 and get the singularity error.
    """
    if isinstance(formula, str):
        target, specs = parse_formula(formula)
    else:
        target, specs = formula
    df = _usable_df(frame)
    periods = getattr(frame, "periods", {}) or {}
    if target not in df.columns:
        raise DataError(f"missing target column {target!r}")
    y = df[target].to_numpy(dtype=float)
    if np.isnan(y).any():
        raise DataError(f"missing values in target {target!r}")
    n = len(y)

    warnings: list = []
    terms = [_build_term(spec, df, periods, warnings) for spec in specs]
    blocks = [t.design(df) for t in terms]
    X = np.hstack(blocks) if blocks else np.empty((n, 0))
    p = X.shape[1] + 1
    if n <= p / 2:
        raise DataError(f"too few rows: n={n} for {p} coefficients")

    if X.shape[1] == 0:
        ybar = float(y.mean())
        rss = float(((y - ybar) ** 2).sum())
        return AdditiveModel(
            target=target, intercept=ybar, terms=[], lambdas={},
            sigma2=rss / max(n - 1, 1), edf=1.0, gcv=n * rss / (n - 1.0) ** 2,
            n_train=n, ranges={}, warnings=warnings,
        )

    slices = []
    start = 0
    for t, b in zip(terms, blocks):
        slices.append(slice(start, start + b.shape[1]))
        start += b.shape[1]
    penalties = [t.penalty() for t in terms]

    ybar = float(y.mean())
    yc = y - ybar
    G = X.T @ X
    Xty = X.T @ yc

    def solve(lams: dict):
        H = G.copy()
        for t, sl, S in zip(terms, slices, penalties):
            if S is not None:
                H[sl, sl] += lams[t.label] * S
        if ridge > 0.0:
            H[np.diag_indices_from(H)] += ridge * float(np.mean(np.diag(G)))
        try:
            chol = cho_factor(H)
        except np.linalg.LinAlgError:
            _raise_singular(terms, slices, H)
        theta = cho_solve(chol, Xty)
        resid = yc - X @ theta
        rss = float(resid @ resid)
        edf = float(np.trace(cho_solve(chol, G))) + 1.0
        return theta, rss, edf

    penalized = [t for t in terms if t.penalized]
    lambdas = {t.label: 1.0 for t in penalized}
    if lambda_policy == "gcv":
        for t in penalized:
            best = None
            for lam in GCV_GRID:
                trial = dict(lambdas)
                trial[t.label] = float(lam)
                _, rss, edf = solve(trial)
                score = n * rss / (n - edf) ** 2
                if best is None or score < best[0]:
                    best = (score, float(lam))
            lambdas[t.label] = best[1]
    elif isinstance(lambda_policy, dict):
        lambdas.update({k: float(v) for k, v in lambda_policy.items()})
    else:
        lambdas = {t.label: float(lambda_policy) for t in penalized}

    theta, rss, edf = solve(lambdas)
    gcv = n * rss / (n - edf) ** 2
    for t, sl in zip(terms, slices):
        t.coefs = theta[sl]

    ranges = {}
    for t in terms:
        for name in t.spec.names:
            if t.spec.kind in ("smooth", "tensor") or (t.spec.kind == "linear"):
                x = df[name].to_numpy(dtype=float)
                ranges[name] = (float(x.min()), float(x.max()))

    return AdditiveModel(
        target=target,
        intercept=ybar,
        terms=terms,
        lambdas=lambdas,
        sigma2=rss / max(n - edf, 1.0),
        edf=edf,
        gcv=gcv,
        n_train=n,
        ranges=ranges,
        warnings=warnings,
    )


def _raise_singular(terms, slices, H):
    # identify the terms loading on the system's null direction
    try:
        w, v = np.linalg.eigh(H)
        null = v[:, 0]
        scale = float(np.max(np.abs(null)))
        bad = []
        for t, sl in zip(terms, slices):
            if scale > 0 and np.max(np.abs(null[sl])) > 1e-3 * scale:
                bad.append(t.label)
    except np.linalg.LinAlgError:
        bad = []
    names = ", ".join(bad) if bad else "unidentified collinearity"
    raise NumericalError(f"singular penalized system; offending terms: {names}")


def predict(model: AdditiveModel, frame) -> np.ndarray:
    return model.predict(frame)


# ---------------------------------------------------------------------------
# effect extraction
# ---------------------------------------------------------------------------

@dataclass
class EffectFunction:
    """A standalone evaluable fitted effect.

    __call__ evaluates the bare shape on covariate values; on_frame
    reproduces the model's internal term contribution (including the
    by-level indicator when present) bit for bit.
    """

    label: str
    term_label: str
    names: tuple
    kind: str
    _shape: object
    _contrib: object
    level: object = None

    def __call__(self, *cols) -> np.ndarray:
        return self._shape(*cols)

    def on_frame(self, frame) -> np.ndarray:
        return self._contrib(_as_df(frame))


def extract_effects(model: AdditiveModel, names=None) -> list:
    """Effect functions for the requested terms (all terms by default).

    By-factor smooths expand into one effect per factor level.
    """
    wanted = None if names is None else set(names)
    seen = set()
    out = []
    for term in model.terms:
        if wanted is not None and term.label not in wanted:
            continue
        seen.add(term.label)
        out.extend(_effects_of(term))
    if wanted is not None and (missing := wanted - seen):
        raise ValueError(f"unknown term name(s): {sorted(missing)}")
    return out


def _effects_of(term: _Term) -> list:
    spec = term.spec
    if spec.kind == "categorical":
        effects = term.level_effects()

        def shape(levels, _eff=effects, _name=spec.names[0]):
            vals = pd.Series(levels).map(_eff)
            if vals.isna().any():
                raise DataError(f"column {_name!r}: unseen categorical level")
            return vals.to_numpy(dtype=float)

        return [
            EffectFunction(
                label=term.label,
                term_label=term.label,
                names=spec.names,
                kind="categorical",
                _shape=shape,
                _contrib=lambda df, _t=term: _t.contribution(df),
            )
        ]
    if spec.kind == "linear":
        def shape(x, _t=term):
            x = np.asarray(x, dtype=float)
            if _t.levels is None:
                return (x - _t.centering[0]) * _t.coefs[0]
            raise ValueError(f"{_t.label}: per-level slopes need on_frame evaluation")

        return [
            EffectFunction(
                label=term.label,
                term_label=term.label,
                names=spec.names,
                kind="linear",
                _shape=shape,
                _contrib=lambda df, _t=term: _t.contribution(df),
            )
        ]
    if spec.kind == "smooth":
        if term.by_levels is None:
            theta = term.shape_coefs()

            def shape(x, _t=term, _theta=theta):
                B = _t.basis.design(np.asarray(x, dtype=float))
                return (B - _t.centering) @ _theta

            return [
                EffectFunction(
                    label=term.label,
                    term_label=term.label,
                    names=spec.names,
                    kind="smooth",
                    _shape=shape,
                    _contrib=lambda df, _t=term: _t.contribution(df),
                )
            ]
        thetas = term.shape_coefs()
        out = []
        for l, level in enumerate(term.by_levels):
            def shape(x, _t=term, _th=thetas[l], _c=term.centering[l]):
                B = _t.basis.design(np.asarray(x, dtype=float))
                return (B - _c) @ _th

            def contrib(df, _t=term, _l=l):
                return _t.level_contribution(df, _l)

            out.append(
                EffectFunction(
                    label=f"{term.label}|{spec.by}={level}",
                    term_label=term.label,
                    names=spec.names,
                    kind="smooth",
                    _shape=shape,
                    _contrib=contrib,
                    level=level,
                )
            )
        return out
    # tensor
    theta = term.shape_coefs()

    def shape(x1, x2, _t=term, _theta=theta):
        B1 = _t.basis1.design(np.asarray(x1, dtype=float))
        B2 = _t.basis2.design(np.asarray(x2, dtype=float))
        P = (B1[:, :, None] * B2[:, None, :]).reshape(B1.shape[0], -1)
        return (P - _t.centering) @ _theta

    return [
        EffectFunction(
            label=term.label,
            term_label=term.label,
            names=spec.names,
            kind="tensor",
            _shape=shape,
            _contrib=lambda df, _t=term: _t.contribution(df),
        )
    ]
