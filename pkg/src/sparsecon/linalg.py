"""Row-echelon standardization of null-space bases.

Two pivot rules are provided.  ``"leftmost"`` is the textbook reduced row
echelon form.  ``"volume"`` picks the pivot columns whose square submatrix
has the largest absolute determinant (preferring the state-derivative
columns over the trailing bias column); the result is still reduced
(identity on the pivot columns) but stays bounded and is continuous up to
row signs where the textbook form blows up, e.g. ``[-sin t, cos t]`` near
``t = 0``.

Reduced rows carry a 1 in their pivot column (``row_scale="pivot"``) or are
rescaled to unit length afterwards (``row_scale="unit"``).  A single
constraint row then becomes the smooth unit normal, without the kinks that
pivot switches put into the pivot-scaled form.
"""

from itertools import combinations

import numpy as np

from .exceptions import ManifoldError

PIVOT_TOL = 1e-9


def rref(A, tol=PIVOT_TOL):
    """Textbook reduced row echelon form with partial (row) pivoting.

    Returns
    -------
    R : ndarray
        Matrix in reduced row echelon form, same shape as ``A``.
    pivots : list of int
        Pivot column of each nonzero row.
    """
    R = np.array(A, dtype=float, copy=True)
    if R.ndim != 2:
        raise ValueError("rref expects a 2-D array")
    rows, cols = R.shape
    pivots = []
    r = 0
    for c in range(cols):
        if r == rows:
            break
        p = r + int(np.argmax(np.abs(R[r:, c])))
        if abs(R[p, c]) <= tol:
            R[r:, c] = 0.0
            continue
        if p != r:
            R[[r, p]] = R[[p, r]]
        R[r] /= R[r, c]
        others = np.arange(rows) != r
        R[others] -= np.outer(R[others, c], R[r])
        pivots.append(c)
        r += 1
    R[np.abs(R) < tol] = 0.0
    return R, pivots


def max_volume_pivots(A, n_primary=None, tol=PIVOT_TOL):
    """Column subset maximizing ``|det(A[:, S])|``.

    Subsets drawn from the first ``n_primary`` columns are preferred; the
    remaining columns are only considered when those are rank deficient.
    Near-ties (relative ``1e-9``) go to the lexicographically smallest subset,
    which keeps the choice independent of row scaling and row rotation.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    c, d = A.shape
    pools = [range(d if n_primary is None else n_primary)]
    if n_primary is not None and n_primary < d:
        pools.append(range(d))
    for pool in pools:
        subsets = list(combinations(pool, c))
        if not subsets:
            continue
        vols = np.abs(np.linalg.det(np.stack([A[:, list(s)] for s in subsets])))
        best = vols.max()
        if best > tol:
            k = int(np.flatnonzero(vols >= best * (1.0 - 1e-9))[0])
            return list(subsets[k])
    raise ManifoldError(f"rows are linearly dependent (rank < {c})")


def standardize_rows(V2t, ref=None, pivoting="volume", n_primary=None, tol=PIVOT_TOL, row_scale="unit"):
    """Canonical, sign-consistent basis of the row space of ``V2t``.

    Rows are normalized to unit length, reduced to echelon form with the
    chosen pivot rule, small entries are zeroed, rows are optionally rescaled
    to unit length, and each row is negated when its dot product with the
    matching row of ``ref`` is negative.
    """
    if row_scale not in ("pivot", "unit"):
        raise ValueError(f"unknown row scaling {row_scale!r}")
    A = np.atleast_2d(np.asarray(V2t, dtype=float))
    norms = np.linalg.norm(A, axis=1)
    if np.any(norms <= tol):
        raise ManifoldError("zero row in null-space basis")
    A = A / norms[:, None]
    if pivoting == "leftmost":
        R, piv = rref(A, tol)
        if len(piv) < A.shape[0]:
            raise ManifoldError(f"rank loss during rref: rank {len(piv)} < {A.shape[0]}")
    elif pivoting == "volume":
        piv = max_volume_pivots(A, n_primary, tol)
        R = np.linalg.solve(A[:, piv], A)
        R[np.abs(R) < tol] = 0.0
        R[:, piv] = np.eye(len(piv))
    else:
        raise ValueError(f"unknown pivoting rule {pivoting!r}")
    if row_scale == "unit":
        R /= np.linalg.norm(R, axis=1)[:, None]
    if ref is not None:
        ref = np.atleast_2d(ref)
        if ref.shape != R.shape:
            raise ValueError(f"reference shape {ref.shape} != basis shape {R.shape}")
        flip = np.einsum("ij,ij->i", R, ref) < 0
        R[flip] *= -1.0
    return R
