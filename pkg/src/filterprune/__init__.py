"""Structured filter pruning for small convolutional networks in numpy."""

from .checkpoint import load_checkpoint, load_checkpoint_file, save_checkpoint, save_checkpoint_file
from .criteria import CRITERIA, allocate_differential, keep_count_for, score_filters, select_top_m
from .datasets import ClassSubsetSpec, Dataset, build_class_subset, load_dataset
from .netgraph import ArchSpec, NetworkGraph, build_model, count_costs, layer_costs
from .pipeline import PruneConfig, RunReport, StepRecord, run_prune_schedule
from .report import emit_report
from .stats import collect_stats, merge_stats
from .surgery import average_consecutive, prune_layer, prune_residual_block
from .training import check_gradients, evaluate, fine_tune, train_from_scratch

__all__ = [
    "ArchSpec", "CRITERIA", "ClassSubsetSpec", "Dataset", "NetworkGraph", "PruneConfig", "RunReport",
    "StepRecord", "allocate_differential", "average_consecutive", "build_class_subset", "build_model",
    "check_gradients", "collect_stats", "count_costs", "emit_report", "evaluate", "fine_tune",
    "keep_count_for", "layer_costs", "load_checkpoint", "load_checkpoint_file", "load_dataset",
    "merge_stats", "prune_layer", "prune_residual_block", "run_prune_schedule", "save_checkpoint",
    "save_checkpoint_file", "score_filters", "select_top_m", "train_from_scratch",
]
