"""Filter scoring criteria and survivor selection.

Every criterion is oriented so that a higher score means a more important
filter, which lets one selection routine serve them all.
"""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .stats import StatsBundle
from .tensor import LayerParams

CRITERIA = (
    "random",
    "mean-activation",
    "l1-norm",
    "entropy",
    "scaled-entropy",
    "apoz",
    "sensitivity",
    "class-specific",
)
STATS_CRITERIA = {"mean-activation", "entropy", "scaled-entropy", "apoz", "sensitivity", "class-specific"}
GRADIENT_CRITERIA = {"sensitivity", "class-specific"}
RANDOM_GENERATOR = "numpy.random.PCG64"


class CriterionError(ValueError):
    pass


@dataclass
class FilterScore:
    layer_id: str
    scores: np.ndarray
    criterion: str
    seed: int | None = None


def entropy(probabilities: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats, with 0 log 0 taken as 0."""
    p = np.asarray(probabilities, dtype=np.float64)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -(p * logs).sum(axis=-1)


def random_scores(n: int, seed: int, layer_id: str = "") -> np.ndarray:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(layer_id.encode()),))
    return np.random.Generator(np.random.PCG64(ss)).uniform(0.0, 1.0, size=n)


def score_filters(criterion: str, layer_id: str, layer: LayerParams, stats: StatsBundle | None = None,
                  class_set=None, seed: int | None = None) -> FilterScore:
    if criterion not in CRITERIA:
        raise CriterionError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    if layer.kind != "conv2d":
        raise CriterionError(f"{layer_id!r} is a {layer.kind} layer; only conv filters are scored")
    if (criterion == "class-specific") != (class_set is not None):
        raise CriterionError("class_set is required by, and only by, the class-specific criterion")
    if (criterion == "random") != (seed is not None):
        raise CriterionError("seed is required by, and only by, the random criterion")
    n = layer.out_channels

    st = None
    if criterion in STATS_CRITERIA:
        if stats is None or layer_id not in stats.layers:
            raise CriterionError(f"{criterion} needs activation statistics for layer {layer_id!r}")
        st = stats.layers[layer_id]
        if st.n_filters != n:
            raise CriterionError(f"statistics for {layer_id!r} cover {st.n_filters} filters, layer has {n}")
        if criterion in GRADIENT_CRITERIA and not stats.with_gradients:
            raise CriterionError(f"{criterion} needs gradient statistics")

    if criterion == "random":
        scores = random_scores(n, seed, layer_id)
    elif criterion == "l1-norm":
        scores = np.abs(layer.weight.astype(np.float64)).reshape(n, -1).sum(axis=1)
    elif criterion == "mean-activation":
        scores = st.mean_activation
    elif criterion == "entropy":
        scores = entropy(st.probabilities)
    elif criterion == "scaled-entropy":
        scores = entropy(st.probabilities) * st.mean_activation
    elif criterion == "apoz":
        scores = 1.0 - st.zero_fraction
    elif criterion == "sensitivity":
        if st.grad_count == 0:
            raise CriterionError("no gradient samples were collected")
        scores = st.grad_l1_sum / st.grad_count
    else:
        classes = sorted(set(int(c) for c in class_set))
        if not classes or min(classes) < 0 or max(classes) >= len(st.class_counts):
            raise CriterionError(f"class set {classes} is empty or out of range")
        count = st.class_counts[classes].sum()
        if count == 0:
            raise CriterionError(f"no training images belong to classes {classes}")
        scores = st.class_grad_l1_sum[classes].sum(axis=0) / count
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise CriterionError(f"non-finite {criterion} scores for {layer_id!r}")
    return FilterScore(layer_id, scores, criterion, seed)


def select_top_m(scores: FilterScore | np.ndarray, keep_count: int) -> np.ndarray:
    """Indices of the ``keep_count`` best filters, ascending; ties favour lower indices."""
    s = scores.scores if isinstance(scores, FilterScore) else np.asarray(scores)
    if not 1 <= keep_count <= len(s):
        raise CriterionError(f"keep_count {keep_count} outside [1, {len(s)}]")
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:keep_count])


def keep_count_for(n_filters: int, prune_percent: int) -> int:
    if not 0 <= prune_percent < 100:
        raise CriterionError(f"prune percent {prune_percent} outside [0, 100)")
    keep = n_filters - math.floor(prune_percent * n_filters / 100)
    if keep < 1:
        warnings.warn(f"pruning {prune_percent}% of {n_filters} filters leaves none; keeping 1")
        keep = 1
    return keep


def allocate_differential(layer_sizes, budget: int) -> list[int]:
    """Split a global prune budget across layers, pruning more from wider layers.

    Each layer's share is proportional to the square of its width. Shares
    are floored, the leftover units go to the largest remainders (wider
    layer first, then lower index), and finally units are moved from
    narrower to wider layers until no narrower layer is pruned by a larger
    fraction. Returns keep counts; every layer keeps at least one filter.
    """
    sizes = [int(n) for n in layer_sizes]
    if any(n < 1 for n in sizes):
        raise CriterionError("layer sizes must be positive")
    capacity = sum(sizes) - len(sizes)
    if not 0 <= budget <= capacity:
        raise CriterionError(f"budget {budget} infeasible; at most {capacity} filters can go")
    prune = [0] * len(sizes)
    open_layers = list(range(len(sizes)))
    remaining = budget
    # cap layers that would lose every filter, then re-split among the rest
    while remaining and open_layers:
        weight = sum(sizes[k] ** 2 for k in open_layers)
        raw = {k: remaining * sizes[k] ** 2 / weight for k in open_layers}
        capped = [k for k in open_layers if raw[k] > sizes[k] - 1]
        if not capped:
            floors = {k: math.floor(raw[k]) for k in open_layers}
            left = remaining - sum(floors.values())
            order = sorted(open_layers, key=lambda k: (-(raw[k] - floors[k]), -sizes[k], k))
            for k in order[:left]:
                floors[k] += 1
            for k in open_layers:
                prune[k] += floors[k]
            remaining = 0
            break
        for k in capped:
            prune[k] = sizes[k] - 1
            remaining -= sizes[k] - 1
            open_layers.remove(k)
    # repair rounding inversions; sum(prune*size) rises each move so this ends
    changed = True
    while changed:
        changed = False
        for a in range(len(sizes)):
            for b in range(len(sizes)):
                if sizes[a] < sizes[b] and prune[a] * sizes[b] > prune[b] * sizes[a]:
                    prune[a] -= 1
                    prune[b] += 1
                    changed = True
    return [n - p for n, p in zip(sizes, prune)]
