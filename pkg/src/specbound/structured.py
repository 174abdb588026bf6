"""Structured perturbation operators and their spectral norms.

Multi-channel convolutions are materialized as block-circulant matrices
(circular boundary, taps anchored at offset 0, cross-correlation
orientation).  Inputs are vectorized channel-major: ``vec(x) = [x_0, x_1, ...]``
with each channel flattened row-major, so the operator for ``a`` input and
``b`` output channels on ``N**dims`` feature maps is ``b*N**dims x a*N**dims``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse

from .errors import ConvergenceError, DegenerateInputError, InputError, UsageError
from .tensor import Rng, spectral_norm

KINDS = ("conv", "locally_connected", "sparse_fc", "dense_gaussian")


@dataclass(frozen=True)
class ConvShape:
    dims: int
    q: int
    a: int
    b: int
    N: int

    def __post_init__(self):
        if self.dims not in (1, 2):
            raise InputError(f"dims must be 1 or 2, got {self.dims}")
        for name in ("q", "a", "b", "N"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.q > self.N:
            raise InputError(f"filter length q={self.q} exceeds feature-map length N={self.N}")

    @property
    def positions(self) -> int:
        return self.N**self.dims

    @property
    def taps(self) -> int:
        return self.q**self.dims

    @property
    def filter_shape(self) -> tuple:
        return (self.b, self.a) + (self.q,) * self.dims

    @property
    def operator_shape(self) -> tuple:
        return (self.b * self.positions, self.a * self.positions)


def check_filter_bank(fb, shape: ConvShape) -> np.ndarray:
    fb = np.asarray(fb, dtype=np.float64)
    if fb.shape != shape.filter_shape:
        raise InputError(f"filter bank shape {fb.shape} does not match {shape.filter_shape}")
    if not np.all(np.isfinite(fb)):
        raise InputError("filter bank has non-finite taps")
    return fb


def _tap_offsets(shape: ConvShape):
    """Yield (tap index tuple, flat source position for each output position)."""
    N = shape.N
    if shape.dims == 1:
        n = np.arange(N)
        for k in range(shape.q):
            yield (k,), (n + k) % N
    else:
        y, x = np.divmod(np.arange(N * N), N)
        for k1 in range(shape.q):
            for k2 in range(shape.q):
                yield (k1, k2), ((y + k1) % N) * N + (x + k2) % N


def build_conv_operator(fb, shape: ConvShape) -> np.ndarray:
    """Dense matrix of the multi-channel circular cross-correlation."""
    fb = check_filter_bank(fb, shape)
    P = shape.positions
    op = np.zeros(shape.operator_shape)
    out_pos = np.arange(P)
    for tap, src in _tap_offsets(shape):
        for i in range(shape.b):
            for j in range(shape.a):
                op[i * P + out_pos, j * P + src] += fb[(i, j) + tap]
    return op


def frequency_blocks(fb, shape: ConvShape) -> np.ndarray:
    """The ``N**dims`` complex ``b x a`` blocks of the DFT-diagonalized operator.

    Block ``n`` holds the N-point DFT (per axis) of each zero-padded filter at
    frequency ``n``.
    """
    fb = check_filter_bank(fb, shape)
    axes = tuple(range(2, 2 + shape.dims))
    spec = np.fft.fftn(fb, s=(shape.N,) * shape.dims, axes=axes)
    spec = spec.reshape(shape.b, shape.a, shape.positions)
    return np.moveaxis(spec, -1, 0)


def conv_spectral_norm_exact(fb, shape: ConvShape) -> float:
    """Spectral norm of the circular conv operator: max over frequency blocks."""
    blocks = frequency_blocks(fb, shape)
    return float(np.linalg.svd(blocks, compute_uv=False)[:, 0].max())


@dataclass(frozen=True)
class SupportPattern:
    """Structurally nonzero coordinates of a ``rows x cols`` matrix."""

    rows: int
    cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    kind: str = "custom"

    @property
    def nnz(self) -> int:
        return int(self.row_idx.size)

    def coords(self) -> set:
        return set(zip(self.row_idx.tolist(), self.col_idx.tolist()))

    def to_dense(self, values) -> np.ndarray:
        m = np.zeros((self.rows, self.cols))
        m[self.row_idx, self.col_idx] = values
        return m

    def to_sparse(self, values) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix(
            (values, (self.row_idx, self.col_idx)), shape=(self.rows, self.cols)
        )


def _sorted_pattern(rows, cols, r, c, kind) -> SupportPattern:
    order = np.lexsort((c, r))
    return SupportPattern(rows, cols, np.asarray(r)[order], np.asarray(c)[order], kind)


def conv_pattern(shape: ConvShape, kind: str = "conv") -> SupportPattern:
    """Banded support shared by convolutional and locally-connected layers."""
    P = shape.positions
    out_pos = np.arange(P)
    r, c = [], []
    for _, src in _tap_offsets(shape):
        for i in range(shape.b):
            for j in range(shape.a):
                r.append(i * P + out_pos)
                c.append(j * P + src)
    rows, cols = shape.operator_shape
    return _sorted_pattern(rows, cols, np.concatenate(r), np.concatenate(c), kind)


def sparse_fc_pattern(n: int, s: int) -> SupportPattern:
    """Square ``n x n`` pattern with exactly ``s`` nonzeros per row and column.

    Row ``i`` holds columns ``(i + k*(n//s)) mod n`` for ``k < s``.
    """
    if not 1 <= s <= n:
        raise InputError(f"need 1 <= s <= n, got s={s}, n={n}")
    stride = n // s
    i = np.repeat(np.arange(n), s)
    k = np.tile(np.arange(s), n)
    return _sorted_pattern(n, n, i, (i + k * stride) % n, "sparse_fc")


def dense_pattern(rows: int, cols: int) -> SupportPattern:
    if rows < 1 or cols < 1:
        raise InputError("dense pattern needs positive dimensions")
    r, c = np.divmod(np.arange(rows * cols), cols)
    return SupportPattern(rows, cols, r, c, "dense_gaussian")


def pattern_for(kind: str, params) -> SupportPattern:
    if kind in ("conv", "locally_connected"):
        if not isinstance(params, ConvShape):
            params = ConvShape(**params)
        return conv_pattern(params, kind)
    if kind == "sparse_fc":
        return sparse_fc_pattern(int(params["n"]), int(params["s"]))
    if kind == "dense_gaussian":
        return dense_pattern(int(params["rows"]), int(params["cols"]))
    raise UsageError(f"unknown perturbation kind {kind!r}; expected one of {KINDS}")


def support_stats(p: SupportPattern) -> tuple[float, float, float]:
    """(sigma1, sigma2, sigma_star) of the 0/1 indicator of ``p``.

    sigma1 is the root of the largest row count, sigma2 of the largest
    column count.
    """
    if p.nnz == 0:
        raise DegenerateInputError("support pattern is empty")
    row_counts = np.bincount(p.row_idx, minlength=p.rows)
    col_counts = np.bincount(p.col_idx, minlength=p.cols)
    return float(np.sqrt(row_counts.max())), float(np.sqrt(col_counts.max())), 1.0


def _conv_shape(params) -> ConvShape:
    return params if isinstance(params, ConvShape) else ConvShape(**params)


def sample_perturbation(kind: str, params, sigma: float, rng: Rng):
    """I.i.d. N(0, sigma^2) perturbation of the given structure.

    ``conv`` returns a filter bank; every other kind returns a dense matrix
    that is zero off its support pattern.
    """
    if sigma < 0:
        raise InputError("sigma must be non-negative")
    if kind == "conv":
        shape = _conv_shape(params)
        return rng.normal(shape.filter_shape, scale=sigma)
    pattern = pattern_for(kind, params)
    return pattern.to_dense(rng.normal(pattern.nnz, scale=sigma))


class MonteCarloResult(NamedTuple):
    mean: float
    std: float
    samples: list


def _trial_norm(kind, params, pattern, sigma, rng, tol, max_iter):
    if kind == "conv":
        shape = _conv_shape(params)
        return conv_spectral_norm_exact(rng.normal(shape.filter_shape, scale=sigma), shape)
    values = rng.normal(pattern.nnz, scale=sigma)
    # sparse storage only when it pays off; both hold the same draws
    if pattern.nnz < 0.25 * pattern.rows * pattern.cols:
        m = pattern.to_sparse(values)
    else:
        m = pattern.to_dense(values)
    # random draws: the all-ones start is almost surely not trapped
    return spectral_norm(m, tol=tol, max_iter=max_iter, confirm=False)


def monte_carlo_spectral(
    kind: str,
    params,
    sigma: float,
    trials: int,
    rng: Rng,
    workers: int = 1,
    tol: float = 1e-9,
    max_iter: int = 100_000,
) -> MonteCarloResult:
    """Empirical mean and sample std of ``||U||_2`` over ``trials`` draws.

    Trial ``t`` draws from ``rng.child(t)``, so results do not depend on
    ``workers``.  Trial 0 reproduces ``sample_perturbation(..., rng.child(0))``.
    """
    if trials < 1:
        raise UsageError("trials must be >= 1")
    if sigma < 0:
        raise InputError("sigma must be non-negative")
    pattern = None if kind == "conv" else pattern_for(kind, params)

    def run(t):
        try:
            return _trial_norm(kind, params, pattern, sigma, rng.child(t), tol, max_iter)
        except ConvergenceError as exc:
            exc.trial = t
            raise

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(run, range(trials)))
    else:
        samples = [run(t) for t in range(trials)]
    arr = np.asarray(samples)
    std = float(arr.std(ddof=1)) if trials > 1 else 0.0
    return MonteCarloResult(float(arr.mean()), std, samples)
