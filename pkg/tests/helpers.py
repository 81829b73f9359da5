import numpy as np
import pandas as pd


def hourly_frame(n, start="2021-03-01T00:00:00", **columns):
    """Minimal record frame: hourly timestamps plus the given columns."""
    ts = pd.Series(pd.date_range(start, periods=n, freq="h"))
    df = pd.DataFrame({"timestamp": ts})
    for name, values in columns.items():
        df[name] = np.asarray(values, dtype=float)
    return df
