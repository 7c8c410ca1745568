"""Inconsistency metrics between observed evidence and a class reference.

Both metrics are dissimilarities: 0 means the observation matches the
reference, larger means more suspicious.
"""

from __future__ import annotations

import numpy as np

VARIANCE_FLOOR = 1e-12


class DegenerateDistributionError(ValueError):
    """A correlation input has (numerically) zero variance."""


def jaccard_inconsistency(a: np.ndarray, b: np.ndarray) -> float:
    """1 - |a AND b| / |a OR b| over two equally sized bit grids, in [0, 1].

    Two empty masks are treated as identical (0): a degenerate pattern is
    still perfectly consistent with itself.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    a = a != 0
    b = b != 0
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    inter = int(np.count_nonzero(a & b))
    return (union - inter) / union


def pearson_inconsistency(f_obs: np.ndarray, f_ref: np.ndarray) -> float:
    """1 - PCC between two activation-magnitude distributions, in [0, 2].

    Population moments (mean over all elements, biased variance).  The value
    is invariant under positive affine rescaling of either argument.
    """
    f_obs = np.asarray(f_obs, np.float64).reshape(-1)
    f_ref = np.asarray(f_ref, np.float64).reshape(-1)
    if f_obs.shape != f_ref.shape:
        raise ValueError(f"vector lengths differ: {f_obs.size} vs {f_ref.size}")
    if f_obs.size < 2:
        raise ValueError("need at least 2 elements for a correlation")
    da = f_obs - f_obs.mean()
    db = f_ref - f_ref.mean()
    var_a = float(da @ da) / f_obs.size
    var_b = float(db @ db) / f_ref.size
    if var_a <= VARIANCE_FLOOR or var_b <= VARIANCE_FLOOR:
        raise DegenerateDistributionError(
            f"zero-variance distribution (var_obs={var_a:.3g}, var_ref={var_b:.3g})")
    pcc = (float(da @ db) / f_obs.size) / np.sqrt(var_a * var_b)
    return float(np.clip(1.0 - pcc, 0.0, 2.0))
