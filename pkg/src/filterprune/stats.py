"""Per-filter activation and gradient statistics from a pass over data.

Each statistic is taken on the rectified output of a conv layer (the
first relu downstream of it, after any residual add). A filter's
"average output" for one image is the spatial mean of its feature map;
histograms bin that per-image average over ``bins`` equal-width bins
spanning ``[0, hi]`` where ``hi`` is the largest per-image average seen
for the layer in a first pass. The rightmost bin is closed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import find_section, pack_section, read_container, unpack_section, write_container
from .netgraph import NetworkGraph
from .tensor import NonFiniteError, softmax_xent


class StatsError(ValueError):
    pass


@dataclass
class FilterStats:
    """Counters for the filters of one conv layer."""

    sum_activation: np.ndarray  # (n,) sum over images of per-image spatial means
    image_count: int
    zero_count: np.ndarray  # (n,) exact zeros in the rectified output
    element_count: np.ndarray  # (n,)
    histogram: np.ndarray  # (n, bins)
    bin_range: tuple[float, float]
    grad_l1_sum: np.ndarray  # (n,)
    grad_count: int
    class_grad_l1_sum: np.ndarray  # (classes, n)
    class_counts: np.ndarray  # (classes,)

    @property
    def n_filters(self) -> int:
        return len(self.sum_activation)

    @property
    def mean_activation(self) -> np.ndarray:
        if self.image_count == 0:
            raise StatsError("no images were seen")
        return self.sum_activation / self.image_count

    @property
    def zero_fraction(self) -> np.ndarray:
        if not np.all(self.element_count > 0):
            raise StatsError("no activations were seen")
        return self.zero_count / self.element_count

    @property
    def probabilities(self) -> np.ndarray:
        if self.image_count == 0:
            raise StatsError("no images were seen")
        return self.histogram / self.image_count

    @classmethod
    def empty(cls, n: int, bins: int, bin_range, classes: int) -> FilterStats:
        return cls(
            np.zeros(n), 0, np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64),
            np.zeros((n, bins), dtype=np.int64), (float(bin_range[0]), float(bin_range[1])),
            np.zeros(n), 0, np.zeros((classes, n)), np.zeros(classes, dtype=np.int64),
        )


@dataclass
class StatsBundle:
    layers: dict[str, FilterStats]
    bins: int
    class_count: int
    with_gradients: bool

    @property
    def images_seen(self) -> int:
        return next(iter(self.layers.values())).image_count if self.layers else 0

    def __getitem__(self, layer_id: str) -> FilterStats:
        return self.layers[layer_id]

    def empty_like(self) -> StatsBundle:
        return StatsBundle(
            {lid: FilterStats.empty(s.n_filters, self.bins, s.bin_range, self.class_count) for lid, s in self.layers.items()},
            self.bins, self.class_count, self.with_gradients,
        )

    def equals(self, other: StatsBundle, rtol: float = 0.0) -> bool:
        if (self.bins, self.class_count, self.with_gradients) != (other.bins, other.class_count, other.with_gradients):
            return False
        if list(self.layers) != list(other.layers):
            return False
        for lid, a in self.layers.items():
            b = other.layers[lid]
            if (a.image_count, a.grad_count, a.bin_range) != (b.image_count, b.grad_count, b.bin_range):
                return False
            for name in ("zero_count", "element_count", "histogram", "class_counts"):
                if not np.array_equal(getattr(a, name), getattr(b, name)):
                    return False
            for name in ("sum_activation", "grad_l1_sum", "class_grad_l1_sum"):
                if not np.allclose(getattr(a, name), getattr(b, name), rtol=rtol, atol=0):
                    return False
        return True


def activation_layers(network: NetworkGraph, layer_ids=None) -> dict[str, str]:
    """Map each conv id to the relu whose output its statistics are read from."""
    wanted = network.conv_ids if layer_ids is None else list(layer_ids)
    out = {}
    for lid in wanted:
        if network.node(lid).kind != "conv2d":
            raise StatsError(f"{lid!r} is not a conv layer")
        cur = network.node(lid)
        while cur.kind != "relu":
            if not cur.consumers:
                raise StatsError(f"conv layer {lid!r} has no downstream relu")
            cur = network.node(cur.consumers[0])
        out[lid] = cur.layer_id
    return out


def _batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, min(n, start + batch_size))


def _spatial_means(act: np.ndarray) -> np.ndarray:
    return act.astype(np.float64).mean(axis=(2, 3))


def activation_ranges(network: NetworkGraph, data, layer_ids=None, batch_size: int = 256) -> dict[str, tuple[float, float]]:
    """First pass: per-layer bin range ``(0, max per-image average output)``."""
    images = data.images
    if len(images) == 0:
        raise StatsError("empty dataset")
    acts = activation_layers(network, layer_ids)
    hi = {lid: 0.0 for lid in acts}
    for sl in _batches(len(images), batch_size):
        _, outputs = network.forward(images[sl], keep=True)
        for lid, relu in acts.items():
            hi[lid] = max(hi[lid], float(_spatial_means(outputs[relu]).max()))
    return {lid: (0.0, h) for lid, h in hi.items()}


def bin_index(values: np.ndarray, bin_range, bins: int) -> np.ndarray:
    lo, hi = bin_range
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def collect_stats(network: NetworkGraph, data, with_gradients: bool = False, bins: int = 10,
                  bin_ranges: dict | None = None, layer_ids=None, batch_size: int = 256) -> StatsBundle:
    """Accumulate every per-filter statistic the scoring criteria use.

    ``data`` is anything with ``images`` and ``labels`` arrays. When
    ``bin_ranges`` is omitted a first pass over ``data`` determines them;
    pass explicit ranges to collect shards that can later be merged.
    """
    images, labels = data.images, np.asarray(data.labels)
    if len(images) == 0:
        raise StatsError("empty dataset")
    if bins < 1:
        raise StatsError("need at least one bin")
    acts = activation_layers(network, layer_ids)
    if bin_ranges is None:
        bin_ranges = activation_ranges(network, data, layer_ids, batch_size)
    classes = network.class_count
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise StatsError(f"labels must lie in [0, {classes})")
    layers = {
        lid: FilterStats.empty(network.node(lid).params.out_channels, bins, bin_ranges[lid], classes)
        for lid in acts
    }
    for sl in _batches(len(images), batch_size):
        x, y = images[sl], labels[sl]
        logits, outputs = network.forward(x, keep=True)
        for lid, relu in acts.items():
            act = outputs[relu]
            if not np.all(np.isfinite(act)):
                raise NonFiniteError(f"non-finite activation after layer {lid!r}")
            st = layers[lid]
            means = _spatial_means(act)
            st.sum_activation += means.sum(axis=0)
            st.image_count += len(x)
            st.zero_count += (act == 0).sum(axis=(0, 2, 3))
            st.element_count += act.shape[0] * act.shape[2] * act.shape[3]
            idx = bin_index(means, st.bin_range, bins)
            for j in range(bins):
                st.histogram[:, j] += (idx == j).sum(axis=0)
        if with_gradients:
            _, dlogits = softmax_xent(logits, y, reduction="none")
            l1 = network.backward(x, outputs, dlogits, example_l1_for=tuple(acts))
            for lid in acts:
                st = layers[lid]
                per = l1[lid].astype(np.float64)
                st.grad_l1_sum += per.sum(axis=0)
                st.grad_count += len(x)
                np.add.at(st.class_grad_l1_sum, y, per)
                st.class_counts += np.bincount(y, minlength=classes)
    for node in network.layers:
        node.params.zero_grad()
    return StatsBundle(layers, bins, classes, with_gradients)


def merge_stats(a: StatsBundle, b: StatsBundle) -> StatsBundle:
    if (a.bins, a.class_count) != (b.bins, b.class_count) or list(a.layers) != list(b.layers):
        raise StatsError("bundles have different layer structure")
    if a.with_gradients != b.with_gradients:
        raise StatsError("cannot merge bundles with and without gradients")
    out = {}
    for lid, x in a.layers.items():
        y = b.layers[lid]
        if x.n_filters != y.n_filters:
            raise StatsError(f"layer {lid!r}: {x.n_filters} vs {y.n_filters} filters")
        if x.bin_range != y.bin_range:
            raise StatsError(f"layer {lid!r}: bin ranges {x.bin_range} and {y.bin_range} differ")
        out[lid] = FilterStats(
            x.sum_activation + y.sum_activation, x.image_count + y.image_count,
            x.zero_count + y.zero_count, x.element_count + y.element_count,
            x.histogram + y.histogram, x.bin_range,
            x.grad_l1_sum + y.grad_l1_sum, x.grad_count + y.grad_count,
            x.class_grad_l1_sum + y.class_grad_l1_sum, x.class_counts + y.class_counts,
        )
    return StatsBundle(out, a.bins, a.class_count, a.with_gradients)


_FIELDS = ("sum_activation", "zero_count", "element_count", "histogram", "grad_l1_sum",
           "class_grad_l1_sum", "class_counts")


def stats_section(bundle: StatsBundle) -> bytes:
    arrays, layers = {}, []
    for lid, st in bundle.layers.items():
        layers.append({"id": lid, "image_count": st.image_count, "grad_count": st.grad_count,
                       "bin_range": list(st.bin_range)})
        for name in _FIELDS:
            arrays[f"{lid}/{name}"] = getattr(st, name)
    meta = {"bins": bundle.bins, "class_count": bundle.class_count,
            "with_gradients": bundle.with_gradients, "layers": layers}
    return pack_section(meta, arrays)


def stats_from_section(payload: bytes) -> StatsBundle:
    meta, arrays = unpack_section(payload)
    layers = {}
    for entry in meta["layers"]:
        lid = entry["id"]
        fields = {name: arrays[f"{lid}/{name}"] for name in _FIELDS}
        layers[lid] = FilterStats(image_count=entry["image_count"], grad_count=entry["grad_count"],
                                  bin_range=tuple(entry["bin_range"]), **fields)
    return StatsBundle(layers, meta["bins"], meta["class_count"], meta["with_gradients"])


def save_stats(bundle: StatsBundle) -> bytes:
    return write_container([("STAT", stats_section(bundle))])


def load_stats(data: bytes) -> StatsBundle:
    return stats_from_section(find_section(read_container(data), "STAT"))
