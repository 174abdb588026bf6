"""Dense matrix primitives: spectral norm, matrix norms, stable rank, seeded RNG.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64.  The spectral
norm routine is duck-typed: anything exposing ``shape``, ``@`` and ``.T``
(``scipy.sparse`` matrices, ``scipy.sparse.linalg.LinearOperator``) works too.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, DegenerateInputError, InputError, UsageError

NORM_KINDS = ("frobenius", "two_one", "one_inf")

_RESEED_LIMIT = 8


def as_matrix(m) -> np.ndarray:
    """Widen ``m`` to a finite, non-empty float64 2-D array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"expected a 2-D matrix, got shape {arr.shape}")
    if arr.size == 0:
        raise InputError("matrix is empty")
    if not np.all(np.isfinite(arr)):
        raise InputError("matrix has non-finite entries")
    return arr


def _is_dense(m) -> bool:
    return isinstance(m, (np.ndarray, list, tuple))


def _seeded_unit(index: int, n: int) -> np.ndarray:
    v = np.random.Generator(np.random.PCG64(index)).standard_normal(n)
    return v / np.linalg.norm(v)


def spectral_norm(m, tol: float = 1e-9, max_iter: int = 10_000, confirm: bool = True) -> float:
    """Largest singular value of ``m`` by power iteration on ``m.T @ m``.

    The start vector is the normalized all-ones vector.  Iteration stops when
    the Rayleigh quotient changes by at most ``tol`` relative.  Stagnation is
    handled by re-seeding from the iteration index (so results stay
    deterministic): when an iterate collapses to zero (start vector in the
    null space), and, with ``confirm``, once after the first convergence,
    keeping the larger estimate.  The confirmation catches start vectors
    trapped in an invariant subspace, such as the constant vectors of a
    (block) circulant; it may be skipped for random matrices, where that has
    probability zero.

    Raises:
        InputError: empty matrix or non-finite entries.
        ConvergenceError: ``max_iter`` reached; carries the last iterate.
    """
    if tol <= 0:
        raise UsageError("tol must be positive")
    if _is_dense(m):
        m = as_matrix(m)
        if not m.any():
            return 0.0
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        raise InputError("matrix is empty")

    v = np.full(cols, 1.0 / np.sqrt(cols))
    prev = None
    reseeds = 0
    stagnation_checked = False
    best = 0.0
    lam = 0.0
    for it in range(max_iter):
        w = np.asarray(m @ v, dtype=np.float64).ravel()
        lam = float(w @ w)
        if prev is not None and abs(lam - prev) <= tol * lam:
            if confirm and not stagnation_checked:
                # the all-ones start may lie in an invariant subspace that
                # misses the top singular vector (e.g. the constant vectors of
                # a block circulant); confirm once from a seeded start
                stagnation_checked = True
                best = lam
                v = _seeded_unit(it, cols)
                prev = None
                continue
            return float(np.sqrt(max(lam, best)))
        z = np.asarray(m.T @ w, dtype=np.float64).ravel()
        nz = float(np.linalg.norm(z))
        if not np.isfinite(nz):
            raise InputError("operator produced non-finite values")
        if nz == 0.0 or nz <= 1e-300:
            if reseeds >= _RESEED_LIMIT:
                return float(np.sqrt(best))
            reseeds += 1
            v = _seeded_unit(it, cols)
            prev = None
            continue
        v = z / nz
        prev = lam
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations",
        last_iterate=v,
        estimate=float(np.sqrt(lam)),
    )


def matrix_norm(m, kind: str = "frobenius") -> float:
    """Frobenius, (2,1) or (1,inf) norm of a dense matrix.

    Both mixed norms follow the ``||A||_{p,q} = ||(||A[:,j]||_p)_j||_q``
    column convention: ``two_one`` sums the l2 norms of the columns and
    ``one_inf`` is the largest l1 norm of a column.
    """
    if kind not in NORM_KINDS:
        raise UsageError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")
    m = as_matrix(m)
    if kind == "frobenius":
        return float(np.sqrt(np.sum(m * m)))
    if kind == "two_one":
        return float(np.sum(np.sqrt(np.sum(m * m, axis=0))))
    return float(np.max(np.sum(np.abs(m), axis=0)))


def stable_rank(m, kind: str = "frobenius", tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """``||m||_kind**2 / ||m||_2**2``."""
    m = as_matrix(m)
    top = spectral_norm(m, tol=tol, max_iter=max_iter)
    if top == 0.0:
        raise DegenerateInputError("stable rank of a zero matrix is undefined")
    return matrix_norm(m, kind) ** 2 / top**2


def child_seed(parent_seed: int, index: int) -> int:
    """Deterministic 64-bit seed for the ``index``-th child of ``parent_seed``."""
    ss = np.random.SeedSequence([int(parent_seed) & (2**64 - 1), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class Rng:
    """Seeded generator: PCG64 bit stream, numpy's ziggurat for normals.

    Same seed gives the same stream on every platform.  Instances are meant
    to have a single owner; parallel work should use :meth:`child`.
    """

    algorithm = "numpy.PCG64+ziggurat"

    def __init__(self, seed: int = 0):
        if seed < 0 or seed >= 2**64:
            raise UsageError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self):
        return f"Rng(seed={self.seed})"

    def child(self, index: int) -> "Rng":
        return Rng(child_seed(self.seed, index))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * scale

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
