from __future__ import annotations

import numpy as np
import pandas as pd

from confound_audit.dataset import Dataset, VariableSpec


def make_ds(columns: dict, kinds: dict | None = None, patients=None, features=None, outcome=None,
            groups: dict | None = None) -> Dataset:
    """Small in-memory dataset; every column defaults to a continuous PT variable."""
    kinds = kinds or {}
    groups = groups or {}
    specs = [VariableSpec("y", "binary", "OUTCOME")]
    specs += [VariableSpec(n, kinds.get(n, "continuous"), groups.get(n, "PT")) for n in columns]
    n = len(next(iter(columns.values()))) if columns else len(outcome)
    y = np.zeros(n) if outcome is None else np.asarray(outcome, dtype=float)
    table = pd.DataFrame({"y": y, **columns}, index=[f"r{i}" for i in range(n)])
    pid = np.array(patients if patients is not None else [f"p{i}" for i in range(n)], dtype=object)
    return Dataset(tuple(specs), table, pid, features)
