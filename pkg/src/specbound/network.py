"""Feed-forward ReLU networks (conv2d, max-pool, fully-connected).

Tensors inside the network are ``(n, C, H, W)``; datasets store images as
``(H, W, C)`` and are transposed on entry.  The flatten before a
fully-connected layer is channel-major, matching the vectorization used for
the layer operators.  Each layer applies its linear map (plus optional
bias), then ReLU unless it is the last layer, then max-pooling if
``pool > 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, svds

from .bounds import LayerNorms, LayerSpec, NetworkSpec
from .data import LabeledDataset
from .errors import DegenerateInputError, InputError, UsageError
from .tensor import Rng, _seeded_unit, matrix_norm, spectral_norm

PADDINGS = ("same", "valid")


def _pads(q: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        lo = (q - 1) // 2
        return lo, q - 1 - lo
    raise UsageError(f"unknown padding {padding!r}")


def conv_output_hw(hw: tuple, q: int, padding: str) -> tuple:
    lo, hi = _pads(q, padding)
    return hw[0] + lo + hi - q + 1, hw[1] + lo + hi - q + 1


def im2col(x: np.ndarray, q: int, padding: str) -> np.ndarray:
    """``(n, C, H, W)`` -> ``(n*Ho*Wo, C*q*q)`` patch matrix."""
    lo, hi = _pads(q, padding)
    if lo or hi:
        x = np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    n, c = x.shape[:2]
    win = sliding_window_view(x, (q, q), axis=(2, 3))
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * q * q)


def conv2d(x: np.ndarray, w: np.ndarray, padding: str = "same") -> np.ndarray:
    """Stride-1 cross-correlation of ``x (n, a, H, W)`` with ``w (b, a, q, q)``."""
    n = x.shape[0]
    b, a, q, _ = w.shape
    if x.shape[1] != a:
        raise InputError(f"conv expects {a} input channels, got {x.shape[1]}")
    ho, wo = conv_output_hw(x.shape[2:], q, padding)
    out = im2col(x, q, padding) @ w.reshape(b, -1).T
    return out.reshape(n, ho, wo, b).transpose(0, 3, 1, 2)


def conv2d_input_grad(g: np.ndarray, w: np.ndarray, in_hw: tuple, padding: str = "same") -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its input."""
    n, b, ho, wo = g.shape
    _, a, q, _ = w.shape
    lo, hi = _pads(q, padding)
    cols = g.transpose(0, 2, 3, 1).reshape(-1, b) @ w.reshape(b, -1)
    cols = cols.reshape(n, ho, wo, a, q, q)
    out = np.zeros((n, a, in_hw[0] + lo + hi, in_hw[1] + lo + hi), dtype=np.result_type(g, w))
    for ky in range(q):
        for kx in range(q):
            out[:, :, ky : ky + ho, kx : kx + wo] += cols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    return out[:, :, lo : lo + in_hw[0], lo : lo + in_hw[1]]


def conv2d_weight_grad(x: np.ndarray, g: np.ndarray, q: int, padding: str = "same") -> np.ndarray:
    b = g.shape[1]
    a = x.shape[1]
    cols = im2col(x, q, padding)
    gm = g.transpose(0, 2, 3, 1).reshape(-1, b)
    return (gm.T @ cols).reshape(b, a, q, q)


def maxpool2d(x: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping ``p x p`` max-pool; returns output and a one-hot argmax mask.

    Trailing rows/columns that do not fill a window are dropped.
    """
    n, c, h, w = x.shape
    hh, ww = h // p, w // p
    xr = x[:, :, : hh * p, : ww * p].reshape(n, c, hh, p, ww, p).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(n, c, hh, ww, p * p)
    idx = np.argmax(xr, axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward(g: np.ndarray, idx: np.ndarray, in_shape: tuple, p: int) -> np.ndarray:
    n, c, h, w = in_shape
    hh, ww = g.shape[2:]
    grad = np.zeros((n, c, hh, ww, p * p), dtype=g.dtype)
    np.put_along_axis(grad, idx[..., None], g[..., None], axis=-1)
    grad = grad.reshape(n, c, hh, ww, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh * p, ww * p)
    out = np.zeros(in_shape, dtype=g.dtype)
    out[:, :, : hh * p, : ww * p] = grad
    return out


@dataclass
class Layer:
    """One layer: ``conv2d`` weight ``(b, a, q, q)`` or ``fc`` weight ``(out, in)``."""

    kind: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    pool: int = 1
    padding: str = "same"
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("conv2d", "fc"):
            raise InputError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]):
            raise InputError(f"conv weight must be (b, a, q, q), got {self.weight.shape}")
        if self.kind == "fc" and self.weight.ndim != 2:
            raise InputError(f"fc weight must be 2-D, got {self.weight.shape}")
        if not np.all(np.isfinite(self.weight)):
            raise InputError(f"layer {self.name!r} has non-finite weights")
        if self.pool < 1:
            raise InputError("pool must be >= 1")
        if self.kind == "fc" and self.pool > 1:
            raise InputError("pooling after a fully-connected layer is not supported")
        _pads(1, self.padding)


@dataclass
class Network:
    layers: list
    input_shape: tuple  # (H, W, C)
    num_classes: int = field(default=0)

    def __post_init__(self):
        if not self.layers:
            raise InputError("network needs at least one layer")
        self.input_shape = tuple(self.input_shape)
        self.layer_input_shapes()  # validates the dimension chain
        if self.num_classes == 0:
            self.num_classes = self.layers[-1].weight.shape[0]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def has_bias(self) -> bool:
        return any(layer.bias is not None for layer in self.layers)

    def param_count(self) -> int:
        return sum(l.weight.size + (0 if l.bias is None else l.bias.size) for l in self.layers)

    def layer_input_shapes(self) -> list[tuple]:
        """Input shape of every layer: ``(C, H, W)`` for conv, ``(features,)`` for fc."""
        h, w, c = self.input_shape
        cur = (c, h, w)
        shapes = []
        for layer in self.layers:
            if layer.kind == "conv2d":
                if len(cur) != 3 or cur[0] != layer.weight.shape[1]:
                    raise InputError(f"layer {layer.name!r}: expects {layer.weight.shape[1]} channels, gets {cur}")
                shapes.append(cur)
                ho, wo = conv_output_hw(cur[1:], layer.weight.shape[2], layer.padding)
                if ho < 1 or wo < 1:
                    raise InputError(f"layer {layer.name!r}: feature map vanishes")
                cur = (layer.weight.shape[0], ho, wo)
            else:
                feats = int(np.prod(cur))
                if feats != layer.weight.shape[1]:
                    raise InputError(f"layer {layer.name!r}: expects {layer.weight.shape[1]} inputs, gets {feats}")
                shapes.append((feats,))
                cur = (layer.weight.shape[0],)
            if layer.pool > 1:
                cur = (cur[0], cur[1] // layer.pool, cur[2] // layer.pool)
        return shapes

    def with_weights(self, weights, biases=None) -> "Network":
        layers = []
        for i, (layer, w) in enumerate(zip(self.layers, weights)):
            b = layer.bias if biases is None else biases[i]
            layers.append(replace(layer, weight=w, bias=b))
        return Network(layers, self.input_shape, self.num_classes)

    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]


def _to_nchw(x: np.ndarray, input_shape: tuple) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == input_shape:
        x = x[None]
    if x.shape[1:] != input_shape:
        raise InputError(f"input shape {x.shape[1:]} does not match network input {input_shape}")
    return x.transpose(0, 3, 1, 2)


def apply_layer(layer: Layer, h: np.ndarray, last: bool) -> np.ndarray:
    if layer.kind == "conv2d":
        z = conv2d(h, layer.weight, layer.padding)
        if layer.bias is not None:
            z = z + layer.bias[None, :, None, None]
    else:
        z = h.reshape(h.shape[0], -1) @ layer.weight.T
        if layer.bias is not None:
            z = z + layer.bias
    if not last:
        z = np.maximum(z, 0)
    if layer.pool > 1:
        z, _ = maxpool2d(z, layer.pool)
    return z


def forward(net: Network, x, batch_size: int = 128) -> np.ndarray:
    """Logits for one image ``(H, W, C)`` -> ``(k,)`` or a batch -> ``(n, k)``."""
    single = np.asarray(x).shape == net.input_shape
    h_all = _to_nchw(x, net.input_shape)
    outs = []
    for start in range(0, max(h_all.shape[0], 1), batch_size):
        h = h_all[start : start + batch_size]
        for i, layer in enumerate(net.layers):
            h = apply_layer(layer, h, i == net.depth - 1)
        outs.append(h.reshape(h.shape[0], -1))
    out = np.concatenate(outs, axis=0)
    return out[0] if single else out


def margin(logits, y: int) -> float:
    """``f[y] - max_{j != y} f[j]``."""
    logits = np.asarray(logits, dtype=np.float64)
    others = np.delete(logits, y)
    return float(logits[y] - others.max())


def margins(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Vectorized :func:`margin` over rows."""
    logits = np.asarray(logits, dtype=np.float64)
    idx = np.arange(len(labels))
    true = logits[idx, labels]
    rest = logits.copy()
    rest[idx, labels] = -np.inf
    return true - rest.max(axis=1)


def empirical_margin_loss(net: Network, data: LabeledDataset, gamma: float) -> float:
    """Fraction of samples with ``f[y] <= gamma + max_{j != y} f[j]`` (ties count as loss)."""
    if gamma < 0:
        raise UsageError("gamma must be non-negative")
    if len(data) == 0:
        raise UsageError("empty dataset")
    mg = margins(forward(net, data.images), data.labels)
    return float(np.mean(mg <= gamma))


# --- layer operators and norms -------------------------------------------------


def conv_operator(weight: np.ndarray, in_shape: tuple, padding: str = "same") -> LinearOperator:
    """Matrix-free linear map of a conv layer on a ``(a, H, W)`` input."""
    a, h, w = in_shape
    b = weight.shape[0]
    ho, wo = conv_output_hw((h, w), weight.shape[2], padding)
    wt = np.asarray(weight, dtype=np.float64)

    def mv(v):
        return conv2d(np.asarray(v, dtype=np.float64).reshape(1, a, h, w), wt, padding).ravel()

    def rmv(u):
        return conv2d_input_grad(np.asarray(u, dtype=np.float64).reshape(1, b, ho, wo), wt, (h, w), padding).ravel()

    return LinearOperator((b * ho * wo, a * h * w), matvec=mv, rmatvec=rmv, dtype=np.float64)


def layer_operator(net: Network, index: int, weight=None):
    """Linear operator of layer ``index`` (optionally with a substitute weight)."""
    layer = net.layers[index]
    w = layer.weight if weight is None else weight
    if layer.kind == "fc":
        return np.asarray(w, dtype=np.float64)
    return conv_operator(w, net.layer_input_shapes()[index], layer.padding)


def operator_spectral_norm(net: Network, index: int, weight=None, tol=1e-12, max_iter=200_000) -> float:
    """Spectral norm of a layer operator.

    Conv operators are large and their top singular values are often
    clustered, which makes plain power iteration crawl; they go through
    Lanczos (ARPACK) from a fixed start vector instead, falling back to power
    iteration if ARPACK fails.  Fully-connected layers use power iteration.
    """
    op = layer_operator(net, index, weight)
    if isinstance(op, LinearOperator) and min(op.shape) > 1:
        try:
            v0 = _seeded_unit(index, min(op.shape))
            s = svds(op, k=1, tol=tol, v0=v0, maxiter=max_iter, return_singular_vectors=False)
            return float(s[0])
        except (ArpackError, ArpackNoConvergence):
            pass
    return spectral_norm(op, tol=tol, max_iter=max_iter)


def network_layer_norms(net: Network, tol: float = 1e-12) -> list[LayerNorms]:
    """Spectral, Frobenius and ``||W^T||_{2,1}`` norms of each layer operator.

    For conv layers the squared row norms of the operator come from
    convolving an all-ones input with the squared filter, which handles the
    zero padding exactly.
    """
    shapes = net.layer_input_shapes()
    out = []
    for i, layer in enumerate(net.layers):
        w = np.asarray(layer.weight, dtype=np.float64)
        spec = operator_spectral_norm(net, i, tol=tol)
        if layer.kind == "fc":
            fro = matrix_norm(w, "frobenius")
            two_one_t = matrix_norm(w.T, "two_one")
        else:
            ones = np.ones((1,) + shapes[i])
            row_sq = conv2d(ones, w * w, layer.padding).ravel()
            fro = float(np.sqrt(row_sq.sum()))
            two_one_t = float(np.sqrt(row_sq).sum())
        out.append(LayerNorms(spec, fro, two_one_t, float(np.sum(w * w))))
    return out


def network_spec(net: Network, B: float = 1.0, m: int = 0) -> NetworkSpec:
    """Architecture summary used by the bound calculus."""
    shapes = net.layer_input_shapes()
    specs = []
    for i, layer in enumerate(net.layers):
        name = layer.name or f"layer{i}"
        if layer.kind == "conv2d":
            b, a, q, _ = layer.weight.shape
            ho, _ = conv_output_hw(shapes[i][1:], q, layer.padding)
            specs.append(LayerSpec("conv2d", a=a, b=b, q=q, N=ho, name=name))
        else:
            rows, cols = layer.weight.shape
            specs.append(LayerSpec("fully_connected", rows=rows, cols=cols, name=name))
    return NetworkSpec(tuple(specs), B=B, k=net.num_classes, m=m)


def normalize_weights(net: Network, tol: float = 1e-12) -> Network:
    """Rescale every layer to spectral norm ``beta = (prod ||W_l||_2)^(1/d)``.

    ReLU and max-pooling are positively homogeneous, so the network function
    is unchanged.  Networks with biases are rejected.
    """
    if net.has_bias:
        raise UsageError("normalize_weights requires a bias-free network")
    norms = [operator_spectral_norm(net, i, tol=tol) for i in range(net.depth)]
    if any(n == 0.0 for n in norms):
        raise DegenerateInputError("a layer has zero spectral norm")
    beta = math.exp(math.fsum(math.log(n) for n in norms) / net.depth)
    return net.with_weights([layer.weight * (beta / n) for layer, n in zip(net.layers, norms)])


def geometric_mean_norm(net: Network, tol: float = 1e-12) -> float:
    norms = [operator_spectral_norm(net, i, tol=tol) for i in range(net.depth)]
    return math.exp(math.fsum(math.log(n) for n in norms) / net.depth)


def build_cnn(
    rng: Rng,
    input_shape=(32, 32, 3),
    channels=(32, 64),
    q: int = 3,
    num_classes: int = 10,
    padding: str = "same",
    bias: bool = False,
    pool: int = 2,
    dtype=np.float64,
) -> Network:
    """Conv stack ``cC q -> MP -> ... -> FC`` with He-normal initialization.

    The defaults give ``32C3 -> MP2 -> 64C3 -> MP2 -> 10FC``.
    """
    h, w, c = input_shape
    layers = []
    for i, ch in enumerate(channels):
        fan_in = c * q * q
        wt = rng.normal((ch, c, q, q), scale=math.sqrt(2.0 / fan_in)).astype(dtype)
        b = np.zeros(ch, dtype=dtype) if bias else None
        layers.append(Layer("conv2d", wt, b, pool=pool, padding=padding, name=f"conv{i + 1}"))
        h, w = conv_output_hw((h, w), q, padding)
        h, w, c = h // pool, w // pool, ch
    feats = h * w * c
    if feats < 1:
        raise InputError(f"feature map vanishes for input {input_shape}")
    wt = rng.normal((num_classes, feats), scale=math.sqrt(1.0 / feats)).astype(dtype)
    b = np.zeros(num_classes, dtype=dtype) if bias else None
    layers.append(Layer("fc", wt, b, name="fc"))
    return Network(layers, input_shape, num_classes)


def build_mlp(rng: Rng, sizes, dtype=np.float64) -> Network:
    """Bias-free fully-connected ReLU net; ``sizes = [in, hidden..., out]``."""
    layers = []
    for i, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
        wt = rng.normal((fout, fin), scale=math.sqrt(2.0 / fin)).astype(dtype)
        layers.append(Layer("fc", wt, name=f"fc{i + 1}"))
    return Network(layers, (1, 1, sizes[0]), sizes[-1])


# --- perturbation sensitivity --------------------------------------------------


@dataclass
class PerturbationReport:
    sigma: float
    gamma: float
    B: float
    beta: float
    deltas: np.ndarray  # (trials,) max over data of ||f_{w+u}(x) - f_w(x)||_2
    u_norms: np.ndarray  # (trials, d) spectral norm of each perturbation operator
    rhs: np.ndarray  # (trials,) e^2 B beta^(d-1) sum_l ||U_l||_2
    admissible: np.ndarray  # (trials,) all ||U_l||_2 <= ||W_l||_2 / d

    @property
    def fraction_within(self) -> float:
        """Fraction of trials with output change at most gamma/4."""
        return float(np.mean(self.deltas <= self.gamma / 4.0))

    @property
    def rhs_holds(self) -> np.ndarray:
        return self.deltas <= self.rhs

    @property
    def violations(self) -> int:
        """Admissible trials that break the perturbation inequality."""
        return int(np.sum(self.admissible & ~self.rhs_holds))


def perturbation_experiment(
    net: Network,
    data: LabeledDataset,
    sigma: float,
    trials: int,
    gamma: float,
    rng: Rng,
    B: float | None = None,
    tol: float = 1e-6,
) -> PerturbationReport:
    """Empirical output sensitivity under Gaussian weight noise.

    The network is first spectrally balanced (same function).  Trial ``t``
    draws ``u ~ N(0, sigma^2 I)`` over every parameter from ``rng.child(t)``;
    conv filters are perturbed tap-wise, which realizes a structured
    perturbation of the conv operator.
    """
    if sigma < 0:
        raise UsageError("sigma must be non-negative")
    if trials < 1:
        raise UsageError("trials must be >= 1")
    norm_net = normalize_weights(net)
    beta = geometric_mean_norm(norm_net)
    if B is None:
        B = data.max_norm()
    d = net.depth
    base = forward(norm_net, data.images)
    deltas = np.empty(trials)
    u_norms = np.empty((trials, d))
    for t in range(trials):
        r = rng.child(t)
        pert = [r.normal(layer.weight.shape, scale=sigma) for layer in norm_net.layers]
        noisy = norm_net.with_weights([layer.weight + u for layer, u in zip(norm_net.layers, pert)])
        diff = forward(noisy, data.images) - base
        deltas[t] = float(np.sqrt(np.max(np.sum(diff * diff, axis=1)))) if len(diff) else 0.0
        for i, u in enumerate(pert):
            u_norms[t, i] = 0.0 if sigma == 0 else operator_spectral_norm(norm_net, i, u, tol=tol)
    rhs = math.e**2 * B * beta ** (d - 1) * u_norms.sum(axis=1)
    admissible = np.all(u_norms <= beta / d, axis=1)
    return PerturbationReport(sigma, gamma, B, beta, deltas, u_norms, rhs, admissible)
