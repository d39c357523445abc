"""SGD training loops, retrain scopes, evaluation and gradient checking."""

from __future__ import annotations

import numpy as np

from .netgraph import ArchSpec, NetworkGraph, build_model
from .tensor import sgd_step, softmax_xent

SCOPES = ("all", "fc-only", "conv-only", "neighbors")


class TrainingError(ValueError):
    pass


def evaluate(network: NetworkGraph, dataset, batch_size: int = 512) -> float:
    """Top-1 accuracy; ties in the logits go to the lower class index."""
    if dataset.class_count != network.class_count:
        raise TrainingError(f"dataset has {dataset.class_count} classes, network predicts {network.class_count}")
    if len(dataset) == 0:
        raise TrainingError("cannot evaluate on an empty dataset")
    preds = network.predict(dataset.images, batch_size)
    return float(np.count_nonzero(preds == dataset.labels)) / len(dataset)


def stratified_sample(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Seeded per-class sample of ``round(fraction * class_size)`` rows, returned sorted."""
    if not 0 < fraction <= 1:
        raise TrainingError(f"data fraction {fraction} outside (0, 1]")
    labels = np.asarray(labels)
    if fraction == 1:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    rows = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        k = int(round(fraction * len(members)))
        rows.append(rng.choice(members, size=k, replace=False))
    rows = np.sort(np.concatenate(rows)) if rows else np.zeros(0, dtype=np.int64)
    if len(rows) == 0:
        raise TrainingError(f"data fraction {fraction} selects no examples")
    return rows


def trainable_layers(network: NetworkGraph, scope: str, layer_id: str | None = None) -> list[str]:
    """Weighted layers updated under a retrain scope."""
    if scope not in SCOPES:
        raise TrainingError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    ids = network.parametric_ids
    if scope == "all":
        return ids
    if scope == "fc-only":
        return [lid for lid in ids if network.node(lid).kind == "dense"]
    if scope == "conv-only":
        return [lid for lid in ids if network.node(lid).kind == "conv2d"]
    if layer_id is None:
        raise TrainingError("neighbors scope needs the id of the pruned layer")
    if layer_id not in ids:
        raise TrainingError(f"{layer_id!r} is not a weighted layer")
    i = ids.index(layer_id)
    return ids[max(0, i - 1) : i + 2]


def train_epochs(network: NetworkGraph, data, epochs: int, lr: float = 0.01, momentum: float = 0.9,
                 batch_size: int = 64, seed: int = 0, trainable=None, on_epoch=None) -> NetworkGraph:
    """Minibatch momentum SGD in place; ``on_epoch(epoch, network)`` runs after each epoch."""
    if epochs < 0:
        raise TrainingError("epochs must be non-negative")
    trainable = network.parametric_ids if trainable is None else list(trainable)
    layers = [network.node(lid).params for lid in trainable]
    for node in network.layers:
        node.params.weight_velocity = node.params.bias_velocity = None
    rng = np.random.default_rng(seed)
    x, y = data.images, np.asarray(data.labels)
    if len(y) == 0:
        raise TrainingError("no training examples")
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            rows = order[start : start + batch_size]
            network.loss_and_grads(x[rows], y[rows])
            for params in layers:
                sgd_step(params, lr, momentum)
        if on_epoch is not None:
            on_epoch(epoch + 1, network)
    for node in network.layers:
        node.params.zero_grad()
        node.params.weight_velocity = node.params.bias_velocity = None
    return network


def fine_tune(network: NetworkGraph, data, epochs: int, scope: str = "all", fraction: float = 1.0,
              seed: int = 0, layer_id: str | None = None, lr: float = 0.01, momentum: float = 0.9,
              batch_size: int = 64, on_epoch=None) -> NetworkGraph:
    """Fine-tune a copy of ``network`` on a class-stratified fraction of ``data``.

    Layers outside ``scope`` stay frozen. ``layer_id`` names the just-pruned
    layer for the neighbors scope.
    """
    trainable = trainable_layers(network, scope, layer_id)
    net = network.copy()
    if epochs == 0:
        return net
    rows = stratified_sample(data.labels, fraction, seed)
    sample = data.subset(rows) if len(rows) != len(data) else data
    return train_epochs(net, sample, epochs, lr, momentum, batch_size, seed + 1, trainable, on_epoch)


def train_from_scratch(spec: ArchSpec, data, epochs: int, seed: int = 0, lr: float = 0.01, momentum: float = 0.9,
                       batch_size: int = 64, dtype=np.float32, on_epoch=None) -> NetworkGraph:
    network = build_model(spec, seed, dtype)
    return train_epochs(network, data, epochs, lr, momentum, batch_size, seed, on_epoch=on_epoch)


def _kink_pattern(network: NetworkGraph, x: np.ndarray) -> list[np.ndarray]:
    """Which relu units fire and which pool inputs win; piecewise-linear regions of the net."""
    _, outputs = network.forward(x, keep=True)
    prod = network.producers()
    pattern = []
    for node in network.layers:
        if node.kind == "relu":
            pattern.append(outputs[node.layer_id] > 0)
        elif node.kind == "maxpool2x2":
            inp = x if prod[node.layer_id] is None else outputs[prod[node.layer_id]]
            n, c, h, w = inp.shape
            win = inp[:, :, : h // 2 * 2, : w // 2 * 2].reshape(n, c, h // 2, 2, w // 2, 2)
            pattern.append(win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4).argmax(axis=-1))
    return pattern


def check_gradients(network: NetworkGraph, x: np.ndarray, labels, epsilon: float = 1e-3,
                    samples_per_layer: int = 12, seed: int = 0) -> float:
    """Max relative error between backprop and finite differences.

    Backprop runs on a 64-bit copy of the network. The finite-difference
    side evaluates the summed cross-entropy of the given examples in extended
    precision (``np.longdouble``) with the fourth-order central stencil, over
    a random subsample of weights and biases in every weighted layer. When a stencil point lands in a different relu/max-pool region
    the step shrinks tenfold (at most four times); parameters that still
    straddle a kink are skipped because no finite difference is valid there.
    Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    net = network.astype(np.float64)
    probe = network.astype(np.longdouble)
    x = np.asarray(x, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(labels))
    if x.ndim == 3:
        x = x[None]
    xl = x.astype(np.longdouble)

    def loss():
        return softmax_xent(probe.forward(xl), labels, "sum")[0]

    def same_region(reference):
        return all(np.array_equal(a, b) for a, b in zip(reference, _kink_pattern(probe, xl)))

    net.loss_and_grads(x, labels, reduction="sum")
    base = _kink_pattern(probe, xl)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for lid in net.parametric_ids:
        params, probe_params = net.node(lid).params, probe.node(lid).params
        pairs = ((probe_params.weight, params.weight_grad), (probe_params.bias, params.bias_grad))
        for array, grad in pairs:
            flat, gflat = array.reshape(-1), grad.reshape(-1)
            picks = rng.choice(flat.size, size=min(samples_per_layer, flat.size), replace=False)
            for k in picks:
                orig = flat[k]
                numeric = None
                h = epsilon
                for _ in range(5):
                    values, smooth = [], True
                    for step in (2, 1, -1, -2):
                        flat[k] = orig + step * h
                        values.append(loss())
                        smooth = smooth and same_region(base)
                    flat[k] = orig
                    if smooth:
                        numeric = float((-values[0] + 8 * values[1] - 8 * values[2] + values[3]) / (12 * h))
                        break
                    h /= 10
                if numeric is None:
                    continue
                analytic = float(gflat[k])
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
