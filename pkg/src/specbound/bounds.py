"""Closed-form concentration bounds, spectral complexity and the margin GE bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, InputError, UsageError
from .structured import ConvShape
from .tensor import as_matrix, matrix_norm, spectral_norm

LAYER_KINDS = ("conv2d", "locally_connected2d", "fully_connected")
CONSTANT_MODES = {"tight": 1.0, "safe": 1.5}


def _check_delta(delta):
    if not 0.0 < delta < 1.0:
        raise UsageError(f"delta must lie in (0, 1), got {delta}")


def _check_sigma(sigma):
    if sigma < 0:
        raise UsageError(f"sigma must be non-negative, got {sigma}")


def bandeira_bound(sigma1, sigma2, sigma_star, dmax, eps=0.5, delta=0.01) -> float:
    """Tail bound on ``||A||_2`` for a Gaussian matrix with variance profile psi.

    Returns ``(1+eps)*(sigma1 + sigma2 + 5/sqrt(ln(1+eps))*sigma_star*sqrt(ln dmax)) + t``
    with ``t = sigma_star*sqrt(2 ln(1/delta))``, the deviation exceeded with
    probability at most ``delta``.
    """
    if not 0.0 < eps <= 0.5:
        raise UsageError(f"eps must lie in (0, 1/2], got {eps}")
    _check_delta(delta)
    if sigma_star < 0:
        raise UsageError("sigma_star must be non-negative")
    if dmax < 1:
        raise UsageError("dmax must be >= 1")
    if sigma_star == 0:
        return (1.0 + eps) * (sigma1 + sigma2)
    core = sigma1 + sigma2 + 5.0 / math.sqrt(math.log1p(eps)) * sigma_star * math.sqrt(math.log(dmax))
    t = sigma_star * math.sqrt(2.0 * math.log(1.0 / delta))
    return (1.0 + eps) * core + t


def _constant(c) -> float:
    if isinstance(c, str):
        try:
            return CONSTANT_MODES[c]
        except KeyError:
            raise UsageError(f"unknown constant mode {c!r}") from None
    return float(c)


def conv_noise_bound(shape: ConvShape, sigma, delta, c=1.5, strict=True) -> float:
    """High-probability bound on the spectral norm of a Gaussian conv perturbation.

    ``sigma*(c*sqrt(q**dims)*(sqrt(a)+sqrt(b)) + sqrt(2 ln(2 N**dims / delta)))``.
    For 2-d filters ``sqrt(q**2) = q``.  ``c`` is 1.5 (default) or 1.0, or the
    mode names ``"safe"`` / ``"tight"``.  ``strict=False`` skips the range
    check on ``delta`` (used to probe the log term in isolation).
    """
    _check_sigma(sigma)
    if strict:
        _check_delta(delta)
    c = _constant(c)
    log_term = math.sqrt(max(0.0, 2.0 * math.log(2.0 * shape.positions / delta)))
    return sigma * (c * math.sqrt(shape.taps) * (math.sqrt(shape.a) + math.sqrt(shape.b)) + log_term)


def lc_support_stats(shape: ConvShape) -> tuple[float, float, float]:
    """Closed-form support statistics of the locally-connected pattern."""
    return math.sqrt(shape.a * shape.taps), math.sqrt(shape.b * shape.taps), 1.0


def lc_noise_bound(shape: ConvShape, sigma, delta, eps=0.5) -> float:
    """Locally-connected perturbation bound via :func:`bandeira_bound`."""
    _check_sigma(sigma)
    s1, s2, s_star = lc_support_stats(shape)
    dmax = max(shape.operator_shape)
    return sigma * bandeira_bound(s1, s2, s_star, dmax, eps, delta)


def fc_noise_bound(s, sigma, delta) -> float:
    """``sigma*(2 sqrt(s) + sqrt(2 ln(1/delta)))`` for row/column sparsity ``s``."""
    _check_sigma(sigma)
    _check_delta(delta)
    return sigma * (2.0 * math.sqrt(s) + math.sqrt(2.0 * math.log(1.0 / delta)))


def gaussian_matrix_bound(rows, cols, sigma, delta) -> float:
    """``sigma*(sqrt(rows) + sqrt(cols) + sqrt(2 ln(1/delta)))`` for i.i.d. entries."""
    _check_sigma(sigma)
    _check_delta(delta)
    return sigma * (math.sqrt(rows) + math.sqrt(cols) + math.sqrt(2.0 * math.log(1.0 / delta)))


@dataclass(frozen=True)
class LayerSpec:
    """Architecture of one layer.

    Conv / locally-connected layers use ``a, b, q, N`` (``N`` is the
    feature-map side length after the layer).  Fully-connected layers use
    ``rows, cols`` and the nonzero count ``s`` (dense when ``s`` is None).
    """

    kind: str
    a: int = 0
    b: int = 0
    q: int = 0
    N: int = 0
    rows: int = 0
    cols: int = 0
    s: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InputError(f"unknown layer kind {self.kind!r}")
        if self.is_conv:
            if min(self.a, self.b, self.q, self.N) < 1:
                raise InputError(f"layer {self.name!r}: a, b, q, N must be >= 1")
            if self.q > self.N:
                raise InputError(f"layer {self.name!r}: q > N")
        else:
            if min(self.rows, self.cols) < 1:
                raise InputError(f"layer {self.name!r}: rows, cols must be >= 1")
            if self.s is not None and not 0 <= self.s <= self.rows * self.cols:
                raise InputError(f"layer {self.name!r}: s out of range")

    @property
    def is_conv(self) -> bool:
        return self.kind != "fully_connected"

    @property
    def nonzeros(self) -> int:
        return self.rows * self.cols if self.s is None else self.s


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    B: float = 1.0
    k: int = 10
    m: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def depth(self) -> int:
        return len(self.layers)


def psi_terms(net: NetworkSpec, mode: str = "full") -> list[float]:
    """Per-layer contributions to Psi_f (zero for FC layers in ``conv_only``)."""
    if mode not in ("full", "conv_only"):
        raise UsageError(f"unknown psi mode {mode!r}")
    if net.depth == 0:
        raise UsageError("network has no layers")
    terms = []
    for layer in net.layers:
        if layer.is_conv:
            terms.append(layer.q * math.sqrt(layer.b))
        else:
            terms.append(math.sqrt(layer.nonzeros) if mode == "full" else 0.0)
    return terms


def psi_f(net: NetworkSpec, mode: str = "full") -> float:
    return math.fsum(psi_terms(net, mode))


def baseline_psi(d: int, h: int) -> float:
    """Architecture constant ``d*sqrt(h)`` of the fully-connected PAC-Bayes bound."""
    return d * math.sqrt(h)


@dataclass(frozen=True)
class LayerNorms:
    """Norm summary of one layer's linear operator.

    ``param_sq`` is the squared l2 norm of the trainable parameters, which
    differs from ``frobenius**2`` for convolutions (weights are shared).
    """

    spectral: float
    frobenius: float
    two_one_t: float
    param_sq: float


def layer_norms(w, tol: float = 1e-12) -> LayerNorms:
    """Norms of a dense weight matrix."""
    if isinstance(w, LayerNorms):
        return w
    w = as_matrix(w)
    fro = matrix_norm(w, "frobenius")
    return LayerNorms(
        spectral=spectral_norm(w, tol=tol, max_iter=200_000),
        frobenius=fro,
        two_one_t=matrix_norm(w.T, "two_one"),
        param_sq=fro**2,
    )


def spectral_complexity(weights: Sequence, variant: str = "RW") -> float:
    """Spectral complexity of a layer stack.

    ``RW``:   prod ||W||_2 * (sum ||W||_F^2 / ||W||_2^2)^(1/2)
    ``RW21``: prod ||W||_2 * (sum ||W^T||_{2,1}^(2/3) / ||W||_2^(2/3))^(3/2)

    ``weights`` may mix dense matrices and precomputed :class:`LayerNorms`.
    """
    if variant not in ("RW", "RW21"):
        raise UsageError(f"unknown variant {variant!r}")
    norms = [layer_norms(w) for w in weights]
    if not norms:
        raise UsageError("no layers")
    if any(n.spectral == 0.0 for n in norms):
        raise DegenerateInputError("a layer has zero spectral norm")
    # log-domain product: deep stacks over/underflow otherwise
    prod = math.exp(math.fsum(math.log(n.spectral) for n in norms))
    if variant == "RW":
        ratio = math.fsum((n.frobenius / n.spectral) ** 2 for n in norms)
        return prod * math.sqrt(ratio)
    ratio = math.fsum((n.two_one_t / n.spectral) ** (2.0 / 3.0) for n in norms)
    return prod * ratio**1.5


@dataclass
class SigmaChoice:
    sigma: float
    K: dict = field(default_factory=dict)
    J: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return math.fsum(list(self.K.values()) + list(self.J.values()))


def _layer_key(i, layer) -> str:
    return layer.name or f"layer{i}"


def sigma_choice(net: NetworkSpec, gamma, B, beta_tilde) -> SigmaChoice:
    """Largest noise level for which the gamma/4 output-stability event has probability >= 1/2.

    ``sigma = gamma / (42 B beta_tilde^(d-1) (sum_conv K_l + sum_fc J_l))`` with
    ``K_l = q_l (sqrt(a_l) + sqrt(b_l) + sqrt(2 ln(4 N_l^2 d)))`` and
    ``J_l = 2 sqrt(s_l) + sqrt(2 ln(2 d))``.
    """
    if net.depth == 0:
        raise UsageError("network has no layers")
    if gamma <= 0 or B <= 0 or beta_tilde <= 0:
        raise UsageError("gamma, B and beta_tilde must be positive")
    d = net.depth
    K, J = {}, {}
    for i, layer in enumerate(net.layers):
        key = _layer_key(i, layer)
        if layer.is_conv:
            K[key] = layer.q * (
                math.sqrt(layer.a) + math.sqrt(layer.b) + math.sqrt(2.0 * math.log(4.0 * layer.N**2 * d))
            )
        else:
            J[key] = 2.0 * math.sqrt(layer.nonzeros) + math.sqrt(2.0 * math.log(2.0 * d))
    choice = SigmaChoice(0.0, K, J)
    choice.sigma = gamma / (42.0 * B * beta_tilde ** (d - 1) * choice.total)
    return choice


def kl_term(weight_sq_norm, sigma) -> float:
    """``|w|^2 / (2 sigma^2)``: KL between N(w, sigma^2 I) and N(0, sigma^2 I)."""
    if weight_sq_norm < 0:
        raise UsageError("squared norm must be non-negative")
    if weight_sq_norm == 0:
        return 0.0
    if sigma <= 0:
        raise UsageError("sigma must be positive")
    return weight_sq_norm / (2.0 * sigma**2)


def cover_size(d: int, m: int) -> float:
    """Number of grid points for beta_tilde in the union bound: ``d * m^(1/(2d))``."""
    return d * m ** (1.0 / (2.0 * d))


@dataclass
class BoundReport:
    value: float
    delta: float
    mode: str
    psi_mode: str = "full"
    constant: float = 1.5
    layer_terms: dict = field(default_factory=dict)
    psi_f: float = float("nan")
    r_w: float = float("nan")
    sigma: float = float("nan")
    kl: float = float("nan")
    beta_tilde: float = float("nan")
    cover_size: float = float("nan")
    delta_prime: float = float("nan")
    gamma: float = float("nan")
    m: int = 0
    B: float = float("nan")

    def rows(self) -> list[tuple[str, float]]:
        """Flat (field, value) pairs for CSV/text output."""
        out = [
            ("value", self.value),
            ("delta", self.delta),
            ("gamma", self.gamma),
            ("m", float(self.m)),
            ("B", self.B),
            ("psi_f", self.psi_f),
            ("r_w", self.r_w),
            ("sigma", self.sigma),
            ("kl", self.kl),
            ("beta_tilde", self.beta_tilde),
            ("cover_size", self.cover_size),
            ("delta_prime", self.delta_prime),
            ("constant", self.constant),
        ]
        out += [(f"term:{k}", v) for k, v in self.layer_terms.items()]
        return out


def ge_bound(
    net: NetworkSpec,
    weights: Sequence,
    gamma: float,
    m: int,
    B: float,
    delta: float = 0.05,
    mode: str = "pac_bayes",
    psi_mode: str = "full",
    beta_tilde: float | None = None,
    r_w: float | None = None,
) -> BoundReport:
    """Generalization-error term of the margin bound.

    ``simplified`` returns ``B * Psi_f * R_W / (gamma sqrt(m))``.
    ``weights`` holds matrices or precomputed :class:`LayerNorms` (e.g. of
    conv operators).  ``r_w`` overrides the spectral complexity (``weights``
    may then be None);
    it is only honoured in ``simplified`` mode.
    ``pac_bayes`` returns ``sqrt((KL + ln(6m/delta')) / (m-1))`` where the KL is
    taken for the spectrally balanced weights at the noise level from
    :func:`sigma_choice`, and ``delta' = delta / (d m^(1/(2d)))`` pays for the
    union bound over the beta_tilde grid.
    """
    if m < 2:
        raise UsageError("m must be >= 2")
    if gamma <= 0:
        raise UsageError("gamma must be positive")
    _check_delta(delta)
    if weights is None and (mode != "simplified" or r_w is None):
        raise UsageError("weights are required unless r_w is given in simplified mode")
    if weights is not None and len(weights) != net.depth:
        raise InputError(f"{len(weights)} weight layers for a depth-{net.depth} network")
    d = net.depth
    report = BoundReport(value=0.0, delta=delta, mode=mode, psi_mode=psi_mode, gamma=gamma, m=m, B=B)

    if mode == "simplified":
        terms = psi_terms(net, psi_mode)
        report.psi_f = math.fsum(terms)
        report.r_w = r_w if r_w is not None else spectral_complexity(weights, "RW")
        scale = B * report.r_w / (gamma * math.sqrt(m))
        report.layer_terms = {_layer_key(i, l): t * scale for i, (l, t) in enumerate(zip(net.layers, terms))}
        report.value = math.fsum(report.layer_terms.values())
        return report
    if mode != "pac_bayes":
        raise UsageError(f"unknown bound mode {mode!r}")

    norms = [w if isinstance(w, LayerNorms) else layer_norms(w) for w in weights]
    zero = [n.spectral == 0.0 for n in norms]
    if all(zero):
        beta, norm_sq = 0.0, 0.0
    elif any(zero):
        raise DegenerateInputError("a layer has zero spectral norm")
    else:
        beta = math.exp(math.fsum(math.log(n.spectral) for n in norms) / d)
        norm_sq = math.fsum((beta / n.spectral) ** 2 * n.param_sq for n in norms)
        report.r_w = spectral_complexity(norms, "RW")
    bt = beta_tilde if beta_tilde is not None else (beta if beta > 0 else 1.0)
    choice = sigma_choice(net, gamma, B, bt)
    report.psi_f = psi_f(net, psi_mode)
    report.sigma = choice.sigma
    report.beta_tilde = bt
    report.layer_terms = {**choice.K, **choice.J}
    report.kl = kl_term(norm_sq, choice.sigma)
    report.cover_size = cover_size(d, m)
    report.delta_prime = delta / report.cover_size
    report.value = math.sqrt((report.kl + math.log(6.0 * m / report.delta_prime)) / (m - 1))
    return report


def network_layer_spec_from_matrix(w, name="") -> LayerSpec:
    """Dense fully-connected LayerSpec for a weight matrix."""
    w = np.asarray(w)
    return LayerSpec("fully_connected", rows=w.shape[0], cols=w.shape[1], name=name)
