"""Deterministic MCAR masking.

The selection of cells to hide is a pure function of (shape, scope, rate,
seed): cells in scope are enumerated row-major and an exact count of them is
drawn without replacement via the package PRNG.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import MISSING_SENTINEL, Dataset
from .errors import InputError
from .rng import choose_without_replacement


@dataclass(frozen=True)
class MaskPlan:
    """The cells an MCAR pass will hide, before any data is touched."""

    shape: tuple[int, int]
    cells: tuple[tuple[int, int], ...]
    rate: float
    seed: int

    @property
    def count(self) -> int:
        return len(self.cells)


def plan_mcar(
    shape: tuple[int, int],
    rate: float,
    seed: int,
    *,
    columns: list[int] | None = None,
    eligible: np.ndarray | None = None,
) -> MaskPlan:
    """Choose exactly ``floor(rate * m + 0.5)`` of the m in-scope cells.

    Scope is the whole matrix by default, restricted by ``columns`` and/or an
    ``eligible`` boolean matrix (e.g. currently-observed cells).  Cells are
    enumerated row-major so the draw is reproducible across runs and
    platforms.
    """
    n, d = shape
    if not 0.0 <= rate < 1.0:
        raise InputError(f"missingness rate must lie in [0, 1), got {rate}")
    colset = set(range(d)) if columns is None else set(columns)
    for c in colset:
        if not 0 <= c < d:
            raise InputError(f"mask column {c} out of range for {d} columns")
    pool: list[tuple[int, int]] = []
    for i in range(n):
        for j in range(d):
            if j not in colset:
                continue
            if eligible is not None and not eligible[i, j]:
                continue
            pool.append((i, j))
    m = len(pool)
    count = int(np.floor(rate * m + 0.5))
    picked = choose_without_replacement(m, count, seed)
    cells = tuple(pool[t] for t in picked)
    return MaskPlan(shape=shape, cells=cells, rate=rate, seed=seed)


def apply_mcar(
    ds: Dataset,
    rate: float,
    seed: int,
    *,
    columns: list[int] | None = None,
) -> tuple[Dataset, MaskPlan]:
    """Hide an exact MCAR fraction of the currently-observed cells.

    Hidden cells get mask=False and the 0.0 sentinel value.  Returns the
    masked dataset and the plan that produced it.
    """
    plan = plan_mcar(
        (ds.n, ds.d), rate, seed, columns=columns, eligible=np.asarray(ds.mask)
    )
    values = ds.values.copy()
    mask = ds.mask.copy()
    for i, j in plan.cells:
        values[i, j] = MISSING_SENTINEL
        mask[i, j] = False
    return ds.with_values(values).with_mask(mask), plan
