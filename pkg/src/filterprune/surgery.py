"""Structural filter removal with channel propagation to consumers."""

from __future__ import annotations

import numpy as np

from .netgraph import GraphError, NetworkGraph

BLOCK_MODES = {"first-only": 1, "first-two": 2}


class SurgeryError(ValueError):
    pass


def residual_constrained(network: NetworkGraph, layer_id: str) -> bool:
    """True when the layer's output (through relu/pool) feeds a residual add."""
    ends = {lid for link in network.residual_links for lid in link}
    if layer_id in ends:
        return True
    passthrough, _ = network.downstream(layer_id)
    return any(lid in ends for lid in passthrough)


def _consumer_columns(network: NetworkGraph, layer_id: str, consumer_id: str):
    """Channel count and spatial size entering ``consumer_id`` from ``layer_id``."""
    shapes = network.shapes()
    producer = network.producers()[consumer_id]
    c, h, w = shapes[producer]
    return c, h * w


def _check_conv(network, layer_id):
    node = network.node(layer_id)
    if node.kind != "conv2d":
        raise SurgeryError(f"{layer_id!r} is a {node.kind} layer; only conv layers lose filters")
    return node


def _normalize_kept(kept, n):
    kept = np.asarray(kept, dtype=np.int64)
    if kept.ndim != 1 or len(kept) == 0:
        raise SurgeryError("kept must be a non-empty list of indices")
    if np.any(np.diff(kept) <= 0):
        raise SurgeryError("kept indices must be strictly ascending")
    if kept[0] < 0 or kept[-1] >= n:
        raise SurgeryError(f"kept indices must lie in [0, {n})")
    return kept


def _prune_unchecked(net: NetworkGraph, layer_id: str, kept: np.ndarray):
    node = net.node(layer_id)
    _, consumer_id = net.downstream(layer_id)
    if consumer_id is not None:
        consumer = net.node(consumer_id).params
        if consumer.kind == "conv2d":
            consumer.weight = consumer.weight[:, kept].copy()
        else:
            channels, spatial = _consumer_columns(net, layer_id, consumer_id)
            w = consumer.weight.reshape(consumer.weight.shape[0], channels, spatial)
            consumer.weight = w[:, kept].reshape(consumer.weight.shape[0], -1).copy()
    p = node.params
    p.weight = p.weight[kept].copy()
    p.bias = p.bias[kept].copy()


def prune_layer(network: NetworkGraph, layer_id: str, kept) -> NetworkGraph:
    """New network with only the ``kept`` filters of a conv layer.

    The next weighted layer loses the matching input channels; for a dense
    consumer every flattened column of a removed channel goes.
    """
    node = _check_conv(network, layer_id)
    kept = _normalize_kept(kept, node.params.out_channels)
    if residual_constrained(network, layer_id):
        raise SurgeryError(
            f"{layer_id!r} feeds a residual add; prune the block's inner layers with prune_residual_block"
        )
    net = network.copy()
    _prune_unchecked(net, layer_id, kept)
    try:
        return net.validate()
    except GraphError as e:
        raise SurgeryError(f"pruning {layer_id!r} broke the graph: {e}") from e


def prune_residual_block(network: NetworkGraph, block: int, kept_per_layer, mode: str = "first-only") -> NetworkGraph:
    """Prune the first (or first two) conv layers of residual block ``block``.

    The block's third layer and the skip connection keep their widths.
    """
    if mode not in BLOCK_MODES:
        raise SurgeryError(f"unknown mode {mode!r}; expected one of {tuple(BLOCK_MODES)}")
    blocks = network.residual_blocks()
    if not 0 <= block < len(blocks):
        raise SurgeryError(f"block {block} does not exist; network has {len(blocks)}")
    convs = blocks[block]
    if len(kept_per_layer) > 2:
        raise SurgeryError("the third layer of a residual block cannot be pruned")
    if len(kept_per_layer) != BLOCK_MODES[mode]:
        raise SurgeryError(f"mode {mode} expects {BLOCK_MODES[mode]} kept lists, got {len(kept_per_layer)}")
    net = network.copy()
    for layer_id, kept in zip(convs, kept_per_layer):
        kept = _normalize_kept(kept, net.node(layer_id).params.out_channels)
        _prune_unchecked(net, layer_id, kept)
    return net.validate()


def average_consecutive(network: NetworkGraph, layer_id: str) -> NetworkGraph:
    """Merge filters (2t, 2t+1) into their mean, halving the layer.

    The consumer's two matching input slices are summed, which keeps the
    composed linear map intact whenever the two original maps were equal.
    """
    node = _check_conv(network, layer_id)
    n = node.params.out_channels
    if n % 2:
        raise SurgeryError(f"{layer_id!r} has an odd number of filters ({n})")
    if residual_constrained(network, layer_id):
        raise SurgeryError(f"{layer_id!r} feeds a residual add and cannot change width")
    net = network.copy()
    p = net.node(layer_id).params
    _, consumer_id = net.downstream(layer_id)
    if consumer_id is not None:
        consumer = net.node(consumer_id).params
        if consumer.kind == "conv2d":
            consumer.weight = consumer.weight[:, 0::2] + consumer.weight[:, 1::2]
        else:
            channels, spatial = _consumer_columns(net, layer_id, consumer_id)
            w = consumer.weight.reshape(consumer.weight.shape[0], channels, spatial)
            consumer.weight = (w[:, 0::2] + w[:, 1::2]).reshape(consumer.weight.shape[0], -1)
    half = p.weight.dtype.type(0.5)
    p.weight = (p.weight[0::2] + p.weight[1::2]) * half
    p.bias = (p.bias[0::2] + p.bias[1::2]) * half
    return net.validate()
