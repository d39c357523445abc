"""Layer-by-layer prune / fine-tune schedule and its run record."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .criteria import (
    GRADIENT_CRITERIA,
    RANDOM_GENERATOR,
    STATS_CRITERIA,
    allocate_differential,
    keep_count_for,
    score_filters,
    select_top_m,
)
from .netgraph import NetworkGraph, count_costs, layer_costs
from .stats import collect_stats
from .surgery import BLOCK_MODES, prune_layer
from .training import SCOPES, evaluate, fine_tune

PEAK_TOLERANCE = 0.0025


class ConfigError(ValueError):
    pass


@dataclass
class PruneConfig:
    criterion: str = "random"
    prune_percent: int | dict[str, int] = 50
    differential_budget: int | None = None
    finetune_epochs: int = 1
    final_finetune_epochs: int = 3
    retrain_scope: str = "all"
    data_fraction: float = 1.0
    skip_layers: list[str] | None = None
    class_set: list[int] | None = None
    seed: int = 0
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    final_lr_factor: float = 0.1
    residual_mode: str = "first-only"
    bins: int = 10

    def validate(self):
        from .criteria import CRITERIA

        if self.criterion not in CRITERIA:
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        percents = self.prune_percent.values() if isinstance(self.prune_percent, dict) else [self.prune_percent]
        if any(not 0 <= m < 100 for m in percents):
            raise ConfigError(f"prune percent must lie in [0, 100), got {self.prune_percent}")
        if self.finetune_epochs < 0 or self.final_finetune_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.retrain_scope not in SCOPES:
            raise ConfigError(f"unknown retrain scope {self.retrain_scope!r}")
        if not 0 < self.data_fraction <= 1:
            raise ConfigError(f"data fraction {self.data_fraction} outside (0, 1]")
        if self.residual_mode not in BLOCK_MODES:
            raise ConfigError(f"unknown residual mode {self.residual_mode!r}")
        if (self.criterion == "class-specific") != bool(self.class_set):
            raise ConfigError("class_set is required by, and only by, the class-specific criterion")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.batch_size < 1:
            raise ConfigError("invalid optimizer settings")
        return self


@dataclass
class StepRecord:
    step: int
    layer_id: str
    criterion: str
    kept: int
    acc_damage: float
    acc_recovery: float
    epochs_to_peak: int
    params: int
    mult_adds: int
    wall_time: float = 0.0
    curve: list[float] = field(default_factory=list)


@dataclass
class RunReport:
    config: dict
    baseline_accuracy: float
    steps: list[StepRecord] = field(default_factory=list)
    final_accuracy: float | None = None
    final_curve: list[float] = field(default_factory=list)
    final_epochs_to_peak: int = 0
    params: int = 0
    mult_adds: int = 0
    random_generator: str = RANDOM_GENERATOR
    wall_time: float = 0.0


def quantize(acc: float) -> float:
    """Accuracies are held at float32 precision so 9-digit CSV fields round-trip."""
    return float(np.float32(acc))


def epochs_to_peak(curve) -> int:
    """First epoch whose accuracy is within PEAK_TOLERANCE of the curve maximum."""
    best = max(curve)
    for epoch, acc in enumerate(curve):
        if acc >= best - PEAK_TOLERANCE:
            return epoch
    return 0


def default_skip_layers(network: NetworkGraph) -> list[str]:
    if network.family == "vgg-tiny" and network.conv_ids:
        return network.conv_ids[:1]
    return []


def prunable_layers(network: NetworkGraph, config: PruneConfig) -> list[str]:
    """Conv layers the schedule visits, in pruning order (last to first)."""
    skip = set(default_skip_layers(network) if config.skip_layers is None else config.skip_layers)
    unknown = skip - set(network.conv_ids)
    if unknown:
        raise ConfigError(f"skip_layers names unknown conv layers {sorted(unknown)}")
    if network.residual_links:
        inner = BLOCK_MODES[config.residual_mode]
        allowed = {lid for block in network.residual_blocks() for lid in block[:inner]}
    else:
        allowed = set(network.conv_ids)
    return [lid for lid in reversed(network.conv_ids) if lid in allowed and lid not in skip]


def planned_keep_counts(network: NetworkGraph, config: PruneConfig, layers: list[str]) -> dict[str, int]:
    sizes = {lid: network.node(lid).params.out_channels for lid in layers}
    if config.differential_budget is not None:
        keeps = allocate_differential([sizes[lid] for lid in layers], config.differential_budget)
        return dict(zip(layers, keeps))
    if isinstance(config.prune_percent, dict):
        unknown = set(config.prune_percent) - set(network.conv_ids)
        if unknown:
            raise ConfigError(f"prune_percent names unknown conv layers {sorted(unknown)}")
        return {lid: keep_count_for(sizes[lid], config.prune_percent.get(lid, 0)) for lid in layers}
    return {lid: keep_count_for(sizes[lid], config.prune_percent) for lid in layers}


def _config_echo(config: PruneConfig) -> dict:
    return asdict(config)


def run_prune_schedule(network: NetworkGraph, config: PruneConfig, train_data, eval_data, log=None):
    """Prune conv layers from last to first, fine-tuning after each one.

    Returns ``(pruned_network, RunReport)``. A step that keeps every filter
    changes nothing and is not fine-tuned; likewise the final fine-tune is
    skipped when no layer lost a filter. The final fine-tune honours the
    retrain scope; under "neighbors" it trains around the last pruned layer.
    If a step fails, the partial report is attached to the exception as
    ``exc.partial_report``.
    """
    config.validate()
    started = time.perf_counter()
    layers = prunable_layers(network, config)
    keeps = planned_keep_counts(network, config, layers)
    baseline = quantize(evaluate(network, eval_data))
    report = RunReport(_config_echo(config), baseline)
    net = network
    pruned_any = False
    try:
        for step, layer_id in enumerate(layers, start=1):
            t0 = time.perf_counter()
            before = quantize(evaluate(net, eval_data))
            n = net.node(layer_id).params.out_channels
            keep = min(keeps[layer_id], n)
            if keep < n:
                stats = None
                if config.criterion in STATS_CRITERIA:
                    stats = collect_stats(net, train_data, with_gradients=config.criterion in GRADIENT_CRITERIA,
                                          bins=config.bins, layer_ids=[layer_id])
                scores = score_filters(
                    config.criterion, layer_id, net.node(layer_id).params, stats,
                    class_set=config.class_set if config.criterion == "class-specific" else None,
                    seed=config.seed if config.criterion == "random" else None,
                )
                kept = select_top_m(scores, keep)
                net = prune_layer(net, layer_id, kept)
                damage = quantize(evaluate(net, eval_data))
                curve = [damage]
                if config.finetune_epochs:
                    net = fine_tune(
                        net, train_data, config.finetune_epochs, config.retrain_scope, config.data_fraction,
                        seed=config.seed * 1000 + step, layer_id=layer_id, lr=config.lr, momentum=config.momentum,
                        batch_size=config.batch_size,
                        on_epoch=lambda e, m: curve.append(quantize(evaluate(m, eval_data))),
                    )
                pruned_any = True
            else:
                damage = before
                curve = [damage]
            params, mult_adds = layer_costs(net)[layer_id]
            record = StepRecord(step, layer_id, config.criterion, keep, damage, curve[-1], epochs_to_peak(curve),
                                params, mult_adds, time.perf_counter() - t0, curve)
            report.steps.append(record)
            if log:
                log(f"step {step} {layer_id}: kept {keep}/{n} damage {damage:.4f} recovery {curve[-1]:.4f}")
        final_curve = [quantize(evaluate(net, eval_data))]
        if pruned_any and config.final_finetune_epochs:
            net = fine_tune(
                net, train_data, config.final_finetune_epochs, config.retrain_scope, config.data_fraction,
                seed=config.seed * 1000 + 999, layer_id=layers[-1] if layers else None,
                lr=config.lr * config.final_lr_factor, momentum=config.momentum, batch_size=config.batch_size,
                on_epoch=lambda e, m: final_curve.append(quantize(evaluate(m, eval_data))),
            )
    except Exception as exc:
        exc.partial_report = report
        raise
    report.final_accuracy = final_curve[-1]
    report.final_curve = final_curve
    report.final_epochs_to_peak = epochs_to_peak(final_curve)
    report.params, report.mult_adds = count_costs(net)
    report.wall_time = time.perf_counter() - started
    if log:
        log(f"final accuracy {report.final_accuracy:.4f} (baseline {baseline:.4f})")
    return net, report
