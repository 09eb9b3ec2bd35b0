import math
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pandas.core.frame import DataFrame

from . import datatypes
from . import utils

# Slack for spans that are a multiple of delta up to rounding, e.g. 140 / 1.
_CELL_ROUNDING = 1e-9


def build_basis(
    lower: Union[float, Sequence[float]],
    upper: Union[float, Sequence[float]],
    delta: float,
    warn: bool = True,
) -> datatypes.HypercubeBasis:
    """
    Partition [lower, upper) into boxes of edge delta, ceil(span / delta) per
    axis. When the span is not a multiple of delta the last cell of the axis
    absorbs the remainder.

    :param lower:       d1, one value per dimension.
    :param upper:       d2, one value per dimension.
    :param delta:       Cell edge, > 0.
    :param warn:        Print a warning when an axis collapses to one cell.
    :return:            The basis.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape or lower.ndim != 1:
        raise ValueError(f"bounds have shapes {lower.shape} and {upper.shape}")
    if not delta > 0:
        raise ValueError(f"cell edge must be positive, got {delta}")
    if not np.all(np.isfinite(lower)) or not np.all(np.isfinite(upper)):
        raise ValueError(f"bounds must be finite, got {lower} and {upper}")
    if np.any(lower >= upper):
        raise ValueError(f"lower bound {lower} is not below upper bound {upper}")
    spans = upper - lower
    if warn and np.any(delta >= spans):
        print(
            f"WARNING: cell edge {delta} covers the whole span {spans.tolist()},"
            f" regression collapses to a single cell along that axis"
        )
    cells = tuple(max(1, math.ceil(span / delta - _CELL_ROUNDING)) for span in spans)
    return datatypes.HypercubeBasis(
        lower=lower, upper=upper, delta=float(delta), cells_per_axis=cells
    )


def data_basis(
    points: np.ndarray, delta: float, warn: bool = True
) -> datatypes.HypercubeBasis:
    """
    Basis on [min, max] of the given points over every leading axis, so that no
    sample is clamped. An axis on which all points coincide gets one cell.
    """
    points = np.asarray(points, dtype=float)
    flat = points.reshape(-1, points.shape[-1])
    if flat.shape[0] == 0:
        raise ValueError("cannot derive a regression domain from zero points")
    lower = flat.min(axis=0)
    top = flat.max(axis=0)
    upper = np.where(top > lower, np.nextafter(top, np.inf), lower + delta)
    return build_basis(lower, upper, delta, warn)


def locate(
    basis: datatypes.HypercubeBasis,
    x: np.ndarray,
    counter: Optional[datatypes.ClampCounter] = None,
) -> Union[int, np.ndarray]:
    """
    Index of the half-open cell containing clamp(x, d1, d2 - ulp). A single
    point gives an int, an (M, d) array gives an array of M indices.
    """
    x = np.asarray(x, dtype=float)
    cells = basis.locate_cells(x, counter)
    if x.ndim == 1:
        return int(cells[0])
    return cells


def check_finite(what: str, step: int, values: np.ndarray):
    flat = np.asarray(values).reshape(values.shape[0], -1)
    bad = ~np.isfinite(flat).all(axis=1)
    if bad.any():
        raise datatypes.NonFiniteError(what, step, int(np.argmax(bad)))


def project(
    basis: datatypes.HypercubeBasis,
    points: np.ndarray,
    responses: np.ndarray,
    counter: Optional[datatypes.ClampCounter] = None,
    cells: Optional[np.ndarray] = None,
) -> datatypes.PiecewiseField:
    """
    Empirical least-squares projection onto the cell indicators. The basis is
    orthogonal, so the minimizer is the per-cell mean of the responses and no
    system is ever solved. Cells without samples hold 0.

    Args:
        basis:      Partition to project on.
        points:     (M, d) regression points.
        responses:  (M, *q) responses aligned with points.
        counter:    Optional clamp counter for points outside the domain.
        cells:      Precomputed cell indices of points, skips the lookup.

    Returns:
        PiecewiseField with values of shape (L, *q) and the occupancy per cell.
    """
    responses = np.asarray(responses, dtype=float)
    samples = responses.shape[0]
    if samples == 0:
        raise ValueError("cannot project zero samples")
    if cells is None:
        cells = basis.locate_cells(points, counter)
    if cells.shape[0] != samples:
        raise ValueError(f"{cells.shape[0]} points but {samples} responses")

    value_shape = responses.shape[1:]
    flat = responses.reshape(samples, -1)
    occupancy = np.bincount(cells, minlength=basis.size)
    sums = np.stack(
        [np.bincount(cells, weights=flat[:, c], minlength=basis.size) for c in range(flat.shape[1])],
        axis=1,
    )
    values = np.zeros_like(sums)
    occupied = occupancy > 0
    values[occupied] = sums[occupied] / occupancy[occupied, None]
    return datatypes.PiecewiseField(
        basis=basis,
        values=values.reshape((basis.size, *value_shape)),
        occupancy=occupancy,
    )


def zero_field(
    basis: datatypes.HypercubeBasis, shape: Tuple[int, ...]
) -> datatypes.PiecewiseField:
    return datatypes.PiecewiseField(
        basis=basis,
        values=np.zeros((basis.size, *shape)),
        occupancy=np.zeros(basis.size, dtype=np.int64),
    )


def reachable_empty_fraction(basis: datatypes.HypercubeBasis, cells: np.ndarray) -> float:
    """
    Share of empty cells inside the bounding box of the occupied ones. Unlike
    the plain empty fraction this ignores the parts of a fixed domain the
    samples never get near.
    """
    axis_index = np.array(np.unravel_index(cells, basis.cells_per_axis))
    reachable = np.prod(axis_index.max(axis=1) - axis_index.min(axis=1) + 1)
    return 1.0 - np.unique(cells).size / float(reachable)


def occupancy_stats(field: datatypes.PiecewiseField) -> Dict[str, float]:
    """Occupied cells, empty fraction and min / max occupancy over occupied cells."""
    occupancy = field.occupancy
    occupied = occupancy[occupancy > 0]
    return {
        "cells": int(occupancy.size),
        "occupied": int(occupied.size),
        "empty_fraction": 1.0 - occupied.size / occupancy.size,
        "min_occupancy": int(occupied.min()) if occupied.size else 0,
        "max_occupancy": int(occupied.max()) if occupied.size else 0,
    }


def cell_frame(basis: datatypes.HypercubeBasis) -> DataFrame:
    """One row per cell with its lower and upper corner."""
    index = np.array(
        np.unravel_index(np.arange(basis.size), basis.cells_per_axis)
    ).T.reshape(basis.size, basis.dim)
    lo = basis.lower + index * basis.delta
    hi = np.minimum(lo + basis.delta, basis.upper)
    df = pd.DataFrame({"cell": np.arange(basis.size)})
    for name, corner in (("cell_lo", lo), ("cell_hi", hi)):
        for column, values in zip(utils.component_columns(name, basis.dim), corner.T):
            df[column] = values
    return df


def field_frame(field: datatypes.PiecewiseField, n: int, label: str) -> DataFrame:
    """
    Export a field as one row per cell: n, cell bounds, occupancy and the cell
    values flattened into columns label, or label_0, label_1, ...
    """
    df = cell_frame(field.basis)
    df.insert(0, "n", n)
    df["occupancy"] = field.occupancy
    flat = field.values.reshape(field.basis.size, -1)
    for column, values in zip(utils.component_columns(label, flat.shape[1]), flat.T):
        df[column] = values
    return df
