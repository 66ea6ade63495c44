"""Dense-array validation shared by the numeric layers."""

import numpy as np

MAX_RANK = 4


def as_dense(x, name="array"):
    """Coerce to a float64 ndarray and validate it.

    Rejects rank above MAX_RANK and non-finite entries. Returns the coerced
    array (no copy when ``x`` is already a float64 ndarray).
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ValueError(
            f"{name}: rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite entries")
    return arr
