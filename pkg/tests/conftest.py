import numpy as np
import pandas as pd
import pytest

from hierforecast.forest import ForestConfig, fit_forest


@pytest.fixture(scope="session", autouse=True)
def warm_numba_kernels():
    """Compile the tree kernels once so timed tests measure the algorithm."""
    rng = np.random.default_rng(0)
    df = pd.DataFrame({
        "y": rng.normal(size=40),
        "x": rng.normal(size=40),
        "c": pd.Categorical(rng.integers(0, 3, 40), categories=[0, 1, 2]),
    })
    f = fit_forest(df, "y", ForestConfig(n_trees=3, min_node_size=2, seed=0))
    f.predict_mean(df)
    f.predict_quantile(df, [0.25, 0.75])


def half_hourly_index(n, start="2021-01-04"):
    return pd.date_range(start, periods=n, freq="30min")
