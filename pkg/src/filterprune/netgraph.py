"""Network topology, model builders and cost accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    LayerParams,
    NonFiniteError,
    ShapeError,
    conv_example_grad_l1,
    layer_apply,
    layer_backprop,
    output_shape,
    softmax_xent,
)

FAMILIES = ("vgg-tiny", "resnet-tiny")


class GraphError(ValueError):
    pass


@dataclass
class Node:
    layer_id: str
    params: LayerParams
    consumers: list[str] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return self.params.kind


@dataclass
class ArchSpec:
    """Architecture recipe.

    vgg-tiny takes an even number of widths: conv pairs, each pair followed
    by a 2x2 max-pool, then two dense layers. resnet-tiny takes a stem width
    followed by three widths per residual block; every block's third width
    must equal the stem width so the skip add lines up.
    """

    family: str
    filters_per_layer: list[int]
    input_shape: tuple[int, int, int] = (1, 8, 8)
    class_count: int = 10
    hidden_units: int = 64

    def __post_init__(self):
        self.filters_per_layer = [int(w) for w in self.filters_per_layer]
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def validate(self):
        widths = self.filters_per_layer
        if self.family not in FAMILIES:
            raise GraphError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not widths or any(w <= 0 for w in widths):
            raise GraphError(f"filter counts must be positive, got {widths}")
        if self.class_count < 1 or self.hidden_units < 1:
            raise GraphError("class_count and hidden_units must be positive")
        if len(self.input_shape) != 3:
            raise GraphError(f"input shape must be (C, H, W), got {self.input_shape}")
        if self.family == "vgg-tiny":
            if len(widths) % 2:
                raise GraphError(f"vgg-tiny needs conv widths in pairs, got {len(widths)} widths")
            pools = len(widths) // 2
            if min(self.input_shape[1:]) >> pools < 1:
                raise GraphError(f"input {self.input_shape} too small for {pools} pooling stages")
        else:
            if len(widths) < 4 or (len(widths) - 1) % 3:
                raise GraphError(f"resnet-tiny needs 1 + 3*blocks widths, got {len(widths)}")
            stem = widths[0]
            for b in range(self.blocks):
                if widths[3 + 3 * b] != stem:
                    raise GraphError(
                        f"block {b + 1} third width {widths[3 + 3 * b]} must equal stem width {stem}"
                    )
            if min(self.input_shape[1:]) < 4:
                raise GraphError(f"input {self.input_shape} too small for resnet-tiny pooling")

    @property
    def blocks(self) -> int:
        return (len(self.filters_per_layer) - 1) // 3 if self.family == "resnet-tiny" else 0

    def scaled(self, factor: float) -> ArchSpec:
        """Same family with interior widths scaled; resnet stem/third widths scale together."""
        widths = [max(1, int(round(w * factor))) for w in self.filters_per_layer]
        return ArchSpec(self.family, widths, self.input_shape, self.class_count, self.hidden_units)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "filters_per_layer": list(self.filters_per_layer),
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "hidden_units": self.hidden_units,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        return cls(d["family"], d["filters_per_layer"], tuple(d["input_shape"]), d["class_count"], d["hidden_units"])


@dataclass
class NetworkGraph:
    layers: list[Node]
    residual_links: list[tuple[str, str]] = field(default_factory=list)
    class_count: int = 0
    input_shape: tuple[int, int, int] = (1, 8, 8)
    family: str | None = None

    def __post_init__(self):
        self.residual_links = [tuple(link) for link in self.residual_links]
        self.input_shape = tuple(self.input_shape)

    # lookup helpers -----------------------------------------------------

    def node(self, layer_id: str) -> Node:
        for node in self.layers:
            if node.layer_id == layer_id:
                return node
        raise KeyError(f"no layer {layer_id!r}")

    def index(self, layer_id: str) -> int:
        for i, node in enumerate(self.layers):
            if node.layer_id == layer_id:
                return i
        raise KeyError(f"no layer {layer_id!r}")

    def producers(self) -> dict[str, str | None]:
        prod = {node.layer_id: None for node in self.layers}
        for node in self.layers:
            for c in node.consumers:
                prod[c] = node.layer_id
        return prod

    @property
    def conv_ids(self) -> list[str]:
        return [n.layer_id for n in self.layers if n.kind == "conv2d"]

    @property
    def parametric_ids(self) -> list[str]:
        return [n.layer_id for n in self.layers if n.params.has_weights]

    @property
    def K(self) -> int:
        return len(self.conv_ids)

    @property
    def dtype(self):
        for node in self.layers:
            if node.params.has_weights:
                return node.params.weight.dtype
        return np.dtype(np.float32)

    def copy(self) -> NetworkGraph:
        return NetworkGraph(
            [Node(n.layer_id, n.params.copy(), list(n.consumers)) for n in self.layers],
            list(self.residual_links),
            self.class_count,
            self.input_shape,
            self.family,
        )

    def astype(self, dtype) -> NetworkGraph:
        net = self.copy()
        for node in net.layers:
            if node.params.has_weights:
                node.params.weight = node.params.weight.astype(dtype)
                node.params.bias = node.params.bias.astype(dtype)
        return net

    def residual_blocks(self) -> list[list[str]]:
        """Conv ids inside each residual block, in link order."""
        blocks = []
        for src, dst in self.residual_links:
            convs = []
            cur = self.node(src)
            while cur.layer_id != dst:
                if len(cur.consumers) != 1:
                    raise GraphError(f"residual path from {src!r} to {dst!r} is not a chain")
                cur = self.node(cur.consumers[0])
                if cur.kind == "conv2d":
                    convs.append(cur.layer_id)
            blocks.append(convs)
        return blocks

    def downstream(self, layer_id: str) -> tuple[list[str], str | None]:
        """Transparent layers after ``layer_id`` and the next parametric consumer."""
        passthrough = []
        cur = self.node(layer_id)
        while cur.consumers:
            cur = self.node(cur.consumers[0])
            if cur.params.has_weights:
                return passthrough, cur.layer_id
            passthrough.append(cur.layer_id)
        return passthrough, None

    # validation ---------------------------------------------------------

    def shapes(self) -> dict[str, tuple]:
        """Per-example output shape of every layer; raises on incompatibility."""
        prod = self.producers()
        index = {n.layer_id: i for i, n in enumerate(self.layers)}
        if len(index) != len(self.layers):
            raise GraphError("duplicate layer ids")
        roots = [lid for lid, p in prod.items() if p is None]
        if self.layers and roots != [self.layers[0].layer_id]:
            raise GraphError(f"exactly the first layer may take the network input, found roots {roots}")
        seen_consumer = set()
        for i, node in enumerate(self.layers):
            if len(node.consumers) > 1:
                raise GraphError(f"layer {node.layer_id!r} has several consumers; only chains are supported")
            for c in node.consumers:
                if c not in index or index[c] <= i:
                    raise GraphError(f"layer {node.layer_id!r} consumer {c!r} is not a later layer")
                if c in seen_consumer:
                    raise GraphError(f"layer {c!r} has more than one producer")
                seen_consumer.add(c)
        adds = {}
        for src, dst in self.residual_links:
            if src not in index or dst not in index or index[src] >= index[dst]:
                raise GraphError(f"residual link {src!r} -> {dst!r} must run forward between existing layers")
            adds.setdefault(dst, []).append(src)
        shapes: dict[str, tuple] = {}
        for node in self.layers:
            p = prod[node.layer_id]
            in_shape = self.input_shape if p is None else shapes[p]
            try:
                shapes[node.layer_id] = output_shape(node.params, in_shape, node.layer_id)
            except ShapeError as e:
                raise GraphError(str(e)) from None
            for src in adds.get(node.layer_id, []):
                if shapes[src] != shapes[node.layer_id]:
                    raise GraphError(
                        f"residual add {src!r} {shapes[src]} into {node.layer_id!r} {shapes[node.layer_id]}: shapes differ"
                    )
        if self.layers:
            last = self.layers[-1]
            if last.consumers:
                raise GraphError("last layer must not have consumers")
            if shapes[last.layer_id] != (self.class_count,):
                raise GraphError(f"network output {shapes[last.layer_id]} does not match class_count {self.class_count}")
        return shapes

    def validate(self) -> NetworkGraph:
        self.shapes()
        return self

    # evaluation ---------------------------------------------------------

    def forward(self, x: np.ndarray, keep: bool = False):
        """Logits for a batch; with ``keep`` also every layer's output."""
        if not self.layers:
            raise GraphError("empty network")
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network expects inputs {self.input_shape}, got {x.shape[1:]}")
        prod = self.producers()
        adds = {}
        for src, dst in self.residual_links:
            adds.setdefault(dst, []).append(src)
        outputs: dict[str, np.ndarray] = {}
        for node in self.layers:
            p = prod[node.layer_id]
            inp = x if p is None else outputs[p]
            out = layer_apply(node.params, inp, node.layer_id)
            for src in adds.get(node.layer_id, []):
                out = out + outputs[src]
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(f"non-finite activation in layer {node.layer_id!r}")
            outputs[node.layer_id] = out
        logits = outputs[self.layers[-1].layer_id]
        return (logits, outputs) if keep else logits

    def backward(self, x: np.ndarray, outputs: dict, logits_grad: np.ndarray, example_l1_for=()):
        """Backpropagate ``logits_grad``; stores weight/bias grads on each layer.

        ``example_l1_for`` names conv layers for which the per-example,
        per-filter l1 norm of the weight gradient is returned.
        """
        x = np.asarray(x, dtype=self.dtype)
        prod = self.producers()
        adds = {}
        for src, dst in self.residual_links:
            adds.setdefault(dst, []).append(src)
        grads = {self.layers[-1].layer_id: logits_grad}
        example_l1 = {}
        for node in reversed(self.layers):
            g = grads.pop(node.layer_id, None)
            if g is None:
                continue
            for src in adds.get(node.layer_id, []):
                grads[src] = grads[src] + g if src in grads else g
            p = prod[node.layer_id]
            inp = x if p is None else outputs[p]
            gin, gw, gb = layer_backprop(node.params, inp, g, node.layer_id)
            if node.params.has_weights:
                node.params.weight_grad = gw
                node.params.bias_grad = gb
            if node.layer_id in example_l1_for:
                example_l1[node.layer_id] = conv_example_grad_l1(node.params, inp, g)
            if p is not None:
                grads[p] = grads[p] + gin if p in grads else gin
        return example_l1

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray, reduction: str = "mean") -> float:
        logits, outputs = self.forward(x, keep=True)
        loss, dlogits = softmax_xent(logits, labels, reduction)
        self.backward(x, outputs, dlogits)
        return float(np.sum(loss))

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        preds = [np.argmax(self.forward(x[i : i + batch_size]), axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# builders ----------------------------------------------------------------


def _init_layer(params: LayerParams, rng: np.random.Generator, dtype):
    fan_in = int(np.prod(params.weight.shape[1:]))
    limit = np.sqrt(6.0 / fan_in)
    params.weight = rng.uniform(-limit, limit, size=params.weight.shape).astype(dtype)
    params.bias = np.zeros(params.weight.shape[0], dtype=dtype)


def build_model(spec: ArchSpec, seed: int = 0, dtype=np.float32) -> NetworkGraph:
    """Build and initialize a network; weights use seeded fan-in uniform scaling."""
    spec.validate()
    rng = np.random.default_rng(seed)
    layers: list[Node] = []

    def add(layer_id, params):
        if layers:
            layers[-1].consumers.append(layer_id)
        if params.has_weights:
            _init_layer(params, rng, dtype)
        layers.append(Node(layer_id, params))

    def conv(out_c, in_c):
        return LayerParams("conv2d", np.zeros((out_c, in_c, 3, 3), dtype), np.zeros(out_c, dtype))

    channels, h, w = spec.input_shape
    links = []
    if spec.family == "vgg-tiny":
        k = 0
        for group in range(len(spec.filters_per_layer) // 2):
            for _ in range(2):
                width = spec.filters_per_layer[k]
                k += 1
                add(f"conv{k}", conv(width, channels))
                add(f"relu{k}", LayerParams("relu"))
                channels = width
            add(f"pool{group + 1}", LayerParams("maxpool2x2"))
            h, w = h // 2, w // 2
    else:
        stem = spec.filters_per_layer[0]
        add("stem", conv(stem, channels))
        add("stem_relu", LayerParams("relu"))
        add("stem_pool", LayerParams("maxpool2x2"))
        h, w = h // 2, w // 2
        channels = stem
        for b in range(spec.blocks):
            block_input = layers[-1].layer_id
            for j in range(3):
                width = spec.filters_per_layer[1 + 3 * b + j]
                add(f"b{b + 1}c{j + 1}", conv(width, channels))
                if j == 2:
                    links.append((block_input, f"b{b + 1}c3"))
                add(f"b{b + 1}r{j + 1}", LayerParams("relu"))
                channels = width
        add("pool", LayerParams("maxpool2x2"))
        h, w = h // 2, w // 2
    flat = channels * h * w
    add("fc1", LayerParams("dense", np.zeros((spec.hidden_units, flat), dtype), np.zeros(spec.hidden_units, dtype)))
    add("fc1_relu", LayerParams("relu"))
    add("fc2", LayerParams("dense", np.zeros((spec.class_count, spec.hidden_units), dtype), np.zeros(spec.class_count, dtype)))
    net = NetworkGraph(layers, links, spec.class_count, spec.input_shape, spec.family)
    return net.validate()


# costs -------------------------------------------------------------------


def layer_costs(network: NetworkGraph) -> dict[str, tuple[int, int]]:
    """(params, mult_adds) for each weighted layer."""
    if not network.layers:
        return {}
    shapes = network.shapes()
    costs = {}
    for node in network.layers:
        p = node.params
        if not p.has_weights:
            continue
        params = p.weight.size + p.bias.size
        if p.kind == "conv2d":
            n, i, kh, kw = p.weight.shape
            _, ho, wo = shapes[node.layer_id]
            mult_adds = n * i * kh * kw * ho * wo
        else:
            mult_adds = p.weight.shape[0] * p.weight.shape[1]
        costs[node.layer_id] = (int(params), int(mult_adds))
    return costs


def count_costs(network: NetworkGraph) -> tuple[int, int]:
    costs = layer_costs(network).values()
    return sum(c[0] for c in costs), sum(c[1] for c in costs)
