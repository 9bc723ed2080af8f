"""Reference imputers: column mean, column median, k-nearest-neighbors.

All three return a complete dataset (every cell observed) and never touch
observed values.
"""

from __future__ import annotations

import numpy as np

from .dataset import ORDINAL, Dataset, normalize
from .errors import InputError


def _complete(ds: Dataset, values: np.ndarray) -> Dataset:
    return Dataset(
        values=values, mask=np.ones_like(ds.mask, dtype=bool), specs=ds.specs
    )


def _observed_column(ds: Dataset, j: int) -> np.ndarray:
    colmask = ds.mask[:, j]
    if not colmask.any():
        raise InputError(f"column {ds.specs[j].name!r} has no observed cells")
    return ds.values[colmask, j]


def mean_impute(ds: Dataset) -> Dataset:
    """Missing cells take their column's observed mean."""
    values = ds.values.copy()
    for j in range(ds.d):
        holes = ~ds.mask[:, j]
        if holes.any():
            values[holes, j] = _observed_column(ds, j).mean()
    return _complete(ds, values)


def median_impute(ds: Dataset) -> Dataset:
    """Missing cells take their column's observed median.

    Continuous columns use the midpoint convention for even counts; ordinal
    columns use the lower median so the fill is always a valid level.
    """
    values = ds.values.copy()
    for j, spec in enumerate(ds.specs):
        holes = ~ds.mask[:, j]
        if not holes.any():
            continue
        col = np.sort(_observed_column(ds, j))
        if spec.kind == ORDINAL:
            fill = float(col[(col.size - 1) // 2])
        else:
            fill = float(np.median(col))
        values[holes, j] = fill
    return _complete(ds, values)


def knn_impute(ds: Dataset, k: int = 5) -> Dataset:
    """Missing cells take the mean over the k nearest rows observing them.

    Distances use min-max-normalized values over the columns observed in
    both rows, scaled by sqrt(d / n_shared) to stay comparable across
    different overlaps; rows sharing no observed column are excluded and
    ties break on row index.  A cell with no eligible neighbor falls back to
    its column mean.
    """
    if k < 1:
        raise InputError("k must be at least 1")
    work = ds if ds.normalization is not None else normalize(ds)
    xn = work.values
    mask = np.asarray(ds.mask)
    n, d = xn.shape
    values = ds.values.copy()
    col_means = [None] * d

    order_index = np.arange(n)
    for i in range(n):
        holes = np.nonzero(~mask[i])[0]
        if holes.size == 0:
            continue
        shared = mask[i] & mask
        counts = shared.sum(axis=1)
        diffs = np.where(shared, xn[i] - xn, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            sq = (diffs * diffs).sum(axis=1) * (d / np.maximum(counts, 1))
        dist = np.sqrt(sq)
        valid = (counts > 0) & (order_index != i)
        # Stable ordering: distance first, then row index.
        ranked = np.lexsort((order_index, dist))
        for j in holes:
            eligible = ranked[(valid & mask[:, j])[ranked]]
            if eligible.size == 0:
                if col_means[j] is None:
                    col_means[j] = float(_observed_column(ds, j).mean())
                values[i, j] = col_means[j]
                continue
            chosen = eligible[:k]
            values[i, j] = float(np.mean(ds.values[chosen, j]))
    return _complete(ds, values)
