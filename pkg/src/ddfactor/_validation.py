import numbers

import numpy as np
from sklearn.utils import check_array


def check_count_matrix(X, *, name="counts", allow_empty_columns=False):
    """Validate an integer-valued nonnegative 2-D count matrix.

    Floats holding integral values are accepted and cast to int64.
    """
    X = check_array(X, dtype=None, ensure_2d=True, ensure_all_finite=True)
    if X.dtype.kind == "f":
        if not np.all(np.equal(np.floor(X), X)):
            raise ValueError(f"{name} must contain integers")
        X = X.astype(np.int64)
    elif X.dtype.kind in "iu":
        X = X.astype(np.int64, copy=False)
    else:
        raise ValueError(f"{name} must be numeric, got dtype {X.dtype}")
    if (X < 0).any():
        i, j = np.argwhere(X < 0)[0]
        raise ValueError(f"{name} has a negative entry at row {i}, column {j}")
    if not allow_empty_columns and (X.sum(axis=0) == 0).any():
        j = int(np.flatnonzero(X.sum(axis=0) == 0)[0])
        raise ValueError(f"{name} column {j} has zero total count")
    return X


def check_positive(value, name, *, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0 or not strict and value < 0:
        raise ValueError(f"{name} must be {'>' if strict else '>='} 0, got {value!r}")
    return float(value)


def check_count(value, name, *, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)


def check_simplex_columns(P, atol=1e-12, name="P"):
    P = np.asarray(P, dtype=float)
    if P.ndim != 2:
        raise ValueError(f"{name} must be 2-D")
    if (P < 0).any() or not np.allclose(P.sum(axis=0), 1.0, rtol=0, atol=atol):
        raise ValueError(f"{name} columns must lie on the probability simplex")
    return P
