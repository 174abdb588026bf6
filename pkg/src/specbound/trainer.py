"""Backpropagation and plain SGD for :class:`~specbound.network.Network`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bounds import spectral_complexity
from .data import LabeledDataset
from .errors import InputError, TrainingError, UsageError
from .network import (
    Network,
    _to_nchw,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    forward,
    margins,
    maxpool2d,
    maxpool2d_backward,
    network_layer_norms,
)
from .tensor import Rng

TRAJECTORY_HEADER = (
    "epoch",
    "train_loss",
    "train_acc",
    "test_acc",
    "ge",
    "rw_over_gamma",
    "rw21_over_gamma",
    "mean_margin",
)


def _forward_cached(net: Network, h: np.ndarray):
    cache = []
    for i, layer in enumerate(net.layers):
        last = i == net.depth - 1
        if layer.kind == "conv2d":
            z = conv2d(h, layer.weight, layer.padding)
            if layer.bias is not None:
                z = z + layer.bias[None, :, None, None]
        else:
            z = h.reshape(h.shape[0], -1) @ layer.weight.T
            if layer.bias is not None:
                z = z + layer.bias
        act = z if last else np.maximum(z, 0)
        idx = None
        out = act
        if layer.pool > 1:
            out, idx = maxpool2d(act, layer.pool)
        cache.append((h, z, act.shape, idx))
        h = out
    return h.reshape(h.shape[0], -1), cache


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy (float64) and its gradient with respect to the logits."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    n = len(labels)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class Gradient:
    loss: float
    weights: list
    biases: list


def gradient(net: Network, images: np.ndarray, labels: np.ndarray) -> Gradient:
    """Exact gradient of the mean softmax cross-entropy over a batch."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise UsageError("empty batch")
    h = _to_nchw(images, net.input_shape).astype(net.layers[0].weight.dtype, copy=False)
    if h.shape[0] != len(labels):
        raise InputError("batch has mismatched image and label counts")
    logits, cache = _forward_cached(net, h)
    loss, g = softmax_cross_entropy(logits, labels)
    g = g.astype(logits.dtype, copy=False)
    dws, dbs = [None] * net.depth, [None] * net.depth
    for i in reversed(range(net.depth)):
        layer = net.layers[i]
        h_in, z, act_shape, idx = cache[i]
        if layer.pool > 1:
            g = maxpool2d_backward(g.reshape(-1, *cache_out_shape(act_shape, layer.pool)), idx, act_shape, layer.pool)
        g = g.reshape(z.shape)
        if i != net.depth - 1:
            g = g * (z > 0)
        if layer.kind == "conv2d":
            q = layer.weight.shape[2]
            dws[i] = conv2d_weight_grad(h_in, g, q, layer.padding)
            dbs[i] = None if layer.bias is None else g.sum(axis=(0, 2, 3))
            if i:
                g = conv2d_input_grad(g, layer.weight, h_in.shape[2:], layer.padding)
        else:
            flat = h_in.reshape(h_in.shape[0], -1)
            dws[i] = g.T @ flat
            dbs[i] = None if layer.bias is None else g.sum(axis=0)
            if i:
                g = (g @ layer.weight).reshape(h_in.shape)
    return Gradient(loss, dws, dbs)


def cache_out_shape(act_shape, p):
    _, c, h, w = act_shape
    return (c, h // p, w // p)


def dataset_loss(net: Network, data: LabeledDataset, batch_size: int = 256) -> float:
    total = 0.0
    for s in range(0, len(data), batch_size):
        logits = forward(net, data.images[s : s + batch_size])
        loss, _ = softmax_cross_entropy(logits, data.labels[s : s + batch_size])
        total += loss * len(logits)
    return total / len(data)


def margin_gamma(margin_values: np.ndarray, correct: np.ndarray, rule: str = "mean_correct", percentile: float = 10.0) -> float:
    """Normalizing margin for the complexity metrics, floored at 1e-6.

    ``mean_correct`` averages the margins of correctly classified samples;
    ``percentile`` takes the given percentile of all margins.
    """
    if rule == "mean_correct":
        good = margin_values[correct]
        g = float(np.mean(good)) if good.size else 0.0
    elif rule == "percentile":
        g = float(np.percentile(margin_values, percentile)) if margin_values.size else 0.0
    else:
        raise UsageError(f"unknown gamma rule {rule!r}")
    return max(g, 1e-6)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    ge: float
    rw_over_gamma: float
    rw21_over_gamma: float
    mean_margin: float
    train_pred: np.ndarray = field(default=None, repr=False)
    test_pred: np.ndarray = field(default=None, repr=False)

    def row(self) -> tuple:
        return tuple(getattr(self, k) for k in TRAJECTORY_HEADER)


@dataclass
class Trajectory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def rows(self) -> list[tuple]:
        return [r.row() for r in self.records]


def _predict(net, data):
    logits = forward(net, data.images)
    return logits, np.argmax(logits, axis=1)


def evaluate_epoch(net, train, test, epoch, gamma_rule="mean_correct", percentile=10.0) -> EpochRecord:
    train_logits, train_pred = _predict(net, train)
    _, test_pred = _predict(net, test)
    train_loss, _ = softmax_cross_entropy(train_logits, train.labels)
    train_acc = float(np.mean(train_pred == train.labels))
    test_acc = float(np.mean(test_pred == test.labels)) if len(test) else float("nan")
    mg = margins(train_logits, train.labels)
    gamma = margin_gamma(mg, train_pred == train.labels, gamma_rule, percentile)
    norms = network_layer_norms(net, tol=1e-9)
    rw = spectral_complexity(norms, "RW") if all(n.spectral > 0 for n in norms) else 0.0
    rw21 = spectral_complexity(norms, "RW21") if rw else 0.0
    return EpochRecord(
        epoch=epoch,
        train_loss=train_loss,
        train_acc=train_acc,
        test_acc=test_acc,
        ge=(1.0 - test_acc) - (1.0 - train_acc),
        rw_over_gamma=rw / gamma,
        rw21_over_gamma=rw21 / gamma,
        mean_margin=gamma,
        train_pred=train_pred,
        test_pred=test_pred,
    )


def sgd_train(
    net: Network,
    train: LabeledDataset,
    test: LabeledDataset,
    lr: float = 0.01,
    epochs: int = 10,
    batch_size: int = 64,
    rng: Rng | None = None,
    gamma_rule: str = "mean_correct",
    percentile: float = 10.0,
    dtype=np.float32,
    progress=None,
) -> tuple[Network, Trajectory]:
    """Plain minibatch SGD; returns the trained network and its per-epoch trajectory.

    Parameters are stored in ``dtype``; losses and metrics are float64.
    Epoch ``e`` shuffles with ``rng.child(e)``.
    """
    if lr < 0:
        raise UsageError("lr must be non-negative")
    if batch_size < 1 or epochs < 0:
        raise UsageError("batch_size must be >= 1 and epochs >= 0")
    if len(train) == 0:
        raise UsageError("empty training set")
    rng = rng or Rng(0)
    weights = [np.array(l.weight, dtype=dtype) for l in net.layers]
    biases = [None if l.bias is None else np.array(l.bias, dtype=dtype) for l in net.layers]
    net = net.with_weights(weights, biases)
    images = train.images.astype(dtype, copy=False)
    traj = Trajectory()
    for epoch in range(1, epochs + 1):
        order = rng.child(epoch).permutation(len(train))
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            # divergence is detected from the loss below; silence the overflow noise
            with np.errstate(over="ignore", invalid="ignore"):
                grad = gradient(net, images[idx], train.labels[idx])
            if not math.isfinite(grad.loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}", epoch=epoch)
            if lr:
                for i in range(net.depth):
                    weights[i] -= dtype(lr) * grad.weights[i].astype(dtype, copy=False)
                    if biases[i] is not None:
                        biases[i] -= dtype(lr) * grad.biases[i].astype(dtype, copy=False)
                if not all(np.all(np.isfinite(w)) for w in weights):
                    raise TrainingError(f"non-finite weights in epoch {epoch}", epoch=epoch)
        net = net.with_weights(weights, biases)
        with np.errstate(over="ignore", invalid="ignore"):
            rec = evaluate_epoch(net, train, test, epoch, gamma_rule, percentile)
        if not math.isfinite(rec.train_loss):
            raise TrainingError(f"non-finite loss in epoch {epoch}", epoch=epoch)
        traj.records.append(rec)
        if progress:
            progress(rec)
    return net, traj
