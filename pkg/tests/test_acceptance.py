"""Acceptance criteria, each run at its stated tolerance.

Criteria 6 to 8 share one experiment on the scikit-learn 8x8 digits: a
vgg-tiny baseline, 50% schedules per criterion and seed, retrain-scope
variants, and half-width networks trained from scratch.
"""

import math
import time

import numpy as np
import pytest

from conftest import tiny_resnet, tiny_vgg
from filterprune.cli import main
from filterprune.criteria import allocate_differential, entropy, keep_count_for, score_filters
from filterprune.datasets import load_dataset, make_digits, save_dataset
from filterprune.netgraph import ArchSpec, build_model, layer_costs
from filterprune.pipeline import PruneConfig, run_prune_schedule
from filterprune.stats import FilterStats, StatsBundle
from filterprune.surgery import prune_layer, prune_residual_block
from filterprune.tensor import LayerParams
from filterprune.training import check_gradients, evaluate, train_from_scratch

SEEDS = (0, 1, 2)
CRITERIA_6 = ("random", "l1-norm", "entropy", "apoz", "mean-activation")
SCOPES_8 = ("conv-only", "neighbors", "fc-only")
WIDTHS = [16, 16, 32, 32]
BASE_EPOCHS = 15
LR = 0.02
SCHEDULE = dict(prune_percent=50, finetune_epochs=1, final_finetune_epochs=3)


# 1 ---------------------------------------------------------------------------


def test_gradient_correctness(verdict):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    errors = {}
    for name, net in (("vgg-tiny", build_model(ArchSpec("vgg-tiny", WIDTHS), 0, np.float64)),
                      ("resnet-tiny", build_model(ArchSpec("resnet-tiny", [8, 4, 4, 8, 4, 4, 8]), 0, np.float64))):
        x = rng.normal(size=(2, 1, 8, 8))
        errors[name] = check_gradients(net, x, rng.integers(0, 10, size=2))
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    verdict("1 gradient correctness", worst < 1e-4 and elapsed < 60,
            ", ".join(f"{k} {v:.2e}" for k, v in errors.items()) + f" (< 1e-4), {elapsed:.1f}s (< 60s)")


# 2 ---------------------------------------------------------------------------


def test_criteria_oracles(verdict):
    uniform = abs(entropy(np.full((1, 10), 0.1))[0] - math.log(10))
    fs = FilterStats.empty(3, 10, (0.0, 1.0), 2)
    fs.image_count, fs.sum_activation[:] = 1, 1.0
    fs.zero_count[:] = [0, 7, 20]
    fs.element_count[:] = 20
    bundle = StatsBundle({"c": fs}, 10, 2, False)
    apoz = 1 - score_filters("apoz", "c", LayerParams("conv2d", np.ones((3, 1, 1, 1)), np.zeros(3)), bundle).scores
    rng = np.random.default_rng(2)
    w = rng.normal(size=(100, 4, 3, 3))
    oracle = np.array([math.fsum(abs(float(v)) for v in f.flat) for f in w])
    l1 = score_filters("l1-norm", "c", LayerParams("conv2d", w, np.zeros(100))).scores
    ok = uniform < 1e-12 and apoz[0] == 0 and apoz[2] == 1 and 0 <= apoz.min() <= apoz.max() <= 1
    ok = ok and np.array_equal(l1, np.abs(w).reshape(100, -1).sum(axis=1))
    ulp = np.max(np.abs(l1 - oracle) / np.spacing(oracle))
    verdict("2 criteria oracles", ok and ulp <= 4,
            f"|H(uniform) - ln 10| = {uniform:.1e}, APoZ extremes {apoz[0]:g}/{apoz[2]:g}, "
            f"l1 exact vs numpy sum, {ulp:.0f} ulp vs fsum")


# 3 ---------------------------------------------------------------------------


def test_dead_channel_exactness(verdict):
    rng = np.random.default_rng(3)
    failures = 0
    for trial in range(50):
        if trial % 5 == 4:
            net = tiny_resnet(seed=trial, dtype=np.float32)
            block = int(rng.integers(0, 2))
            layer_id = net.residual_blocks()[block][0]
        else:
            widths = rng.integers(2, 9, size=4).tolist()
            net = tiny_vgg(seed=trial, widths=widths, dtype=np.float32)
            layer_id = net.conv_ids[int(rng.integers(0, 4))]
        n = net.node(layer_id).params.out_channels
        dead = np.sort(rng.choice(n, size=int(rng.integers(1, n)), replace=False))
        kept = np.setdiff1d(np.arange(n), dead)
        _, consumer_id = net.downstream(layer_id)
        w = net.node(consumer_id).params.weight
        if w.ndim == 4:
            w[:, dead] = 0
        else:
            w.reshape(w.shape[0], n, -1)[:, dead] = 0
        if trial % 5 == 4:
            pruned = prune_residual_block(net, block, [kept])
        else:
            pruned = prune_layer(net, layer_id, kept)
        for _ in range(10):
            x = rng.normal(size=(3, 1, 8, 8)).astype(np.float32)
            failures += not np.array_equal(pruned.forward(x), net.forward(x))
    verdict("3 dead-channel exactness", failures == 0, f"{failures} of 500 forward comparisons differ")


# 4 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def digits(tmp_path_factory):
    path = tmp_path_factory.mktemp("digits") / "digits.fpk"
    save_dataset(make_digits(), path)
    return path, load_dataset(path, "train"), load_dataset(path, "eval")


def test_cost_accounting(verdict, digits):
    _, train, test = digits
    mismatches, checked = [], 0
    widths = [6, 10, 12, 14]
    for m in (0, 10, 25, 50, 75):
        net = build_model(ArchSpec("vgg-tiny", widths, (1, 8, 8), 10, 16), seed=m)
        out, report = run_prune_schedule(net, PruneConfig(criterion="l1-norm", prune_percent=m, finetune_epochs=0,
                                                          final_finetune_epochs=0), train.subset(range(64)), test)
        keep = [widths[0]] + [keep_count_for(w, m) for w in widths[1:]]
        costs = layer_costs(out)
        channels, size = 1, 8
        for k, w in enumerate(keep):
            checked += 1
            if costs[f"conv{k + 1}"][1] != w * channels * 9 * size * size:
                mismatches.append((m, k))
            channels = w
            size = size // 2 if k % 2 else size
        checked += 1
        if costs["fc1"][1] != 16 * channels * size * size:
            mismatches.append((m, "fc1"))
    verdict("4 cost accounting", not mismatches, f"{checked} per-layer mult_adds checked, mismatches {mismatches}")


# 5 ---------------------------------------------------------------------------


def test_differential_allocation(verdict):
    sizes = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512]
    reference = [59, 59, 108, 108, 175, 175, 175, 185, 185, 185, 185]
    keep = allocate_differential(sizes, 1600)
    pruned = [n - k for n, k in zip(sizes, keep)]
    monotone = all(pruned[a] * sizes[b] <= pruned[b] * sizes[a]
                   for a in range(len(sizes)) for b in range(len(sizes)) if sizes[a] < sizes[b])
    close = max(abs(a - b) for a, b in zip(keep, reference))
    verdict("5 differential allocation", sum(pruned) == 1600 and monotone and close <= 2,
            f"pruned {sum(pruned)} of budget 1600, monotone {monotone}, keep {keep}, max deviation {close} (<= 2)")


# 6 to 8 ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def experiment(digits):
    _, train, test = digits
    cpu = time.process_time()
    base = train_from_scratch(ArchSpec("vgg-tiny", WIDTHS), train, BASE_EPOCHS, seed=0, lr=LR)
    baseline = evaluate(base, test)
    final = {}
    for criterion in CRITERIA_6:
        for seed in SEEDS:
            _, rep = run_prune_schedule(base, PruneConfig(criterion=criterion, seed=seed, **SCHEDULE), train, test)
            final[criterion, seed] = rep.final_accuracy
    for scope in SCOPES_8:
        for seed in SEEDS:
            _, rep = run_prune_schedule(base, PruneConfig(criterion="l1-norm", seed=seed, retrain_scope=scope,
                                                          **SCHEDULE), train, test)
            final[scope, seed] = rep.final_accuracy
    # same epoch budget as baseline training plus every fine-tuning epoch of a schedule
    epochs = BASE_EPOCHS + 3 * SCHEDULE["finetune_epochs"] + SCHEDULE["final_finetune_epochs"]
    half = ArchSpec("vgg-tiny", WIDTHS).scaled(0.5)
    scratch = {seed: evaluate(train_from_scratch(half, train, epochs, seed=seed, lr=LR), test) for seed in SEEDS}
    return {"baseline": baseline, "final": final, "scratch": scratch, "cpu": time.process_time() - cpu}


def _mean(final, key):
    return float(np.mean([final[key, s] for s in SEEDS]))


def test_plasticity(verdict, experiment):
    final, baseline = experiment["final"], experiment["baseline"]
    means = {c: _mean(final, c) for c in CRITERIA_6}
    gap = 100 * abs(means["random"] - means["l1-norm"])
    worst = max(100 * abs(baseline - final[c, s]) for c in CRITERIA_6 for s in SEEDS)
    cpu = experiment["cpu"]
    verdict("6 plasticity", gap <= 3 and worst <= 6 and cpu < 7200,
            f"baseline {100 * baseline:.2f}%, means " + ", ".join(f"{c} {100 * v:.2f}" for c, v in means.items())
            + f"; |random - l1| {gap:.2f} pts (<= 3), worst drop {worst:.2f} pts (<= 6), cpu {cpu:.0f}s (< 7200)")


def test_smaller_from_scratch(verdict, experiment):
    pruned = _mean(experiment["final"], "l1-norm")
    scratch = float(np.mean(list(experiment["scratch"].values())))
    verdict("7 smaller from scratch", 100 * scratch <= 100 * pruned + 1,
            f"half-width from scratch {100 * scratch:.2f}% vs pruned {100 * pruned:.2f}% (+1 pt allowed), "
            f"per seed {[round(100 * v, 2) for v in experiment['scratch'].values()]}")


def test_retrain_scope_ordering(verdict, experiment):
    final = experiment["final"]
    means = {s: _mean(final, s) for s in SCOPES_8}
    ok = means["conv-only"] >= means["neighbors"] >= means["fc-only"]
    verdict("8 retrain-scope ordering", ok, ", ".join(f"{s} {100 * v:.2f}%" for s, v in means.items()))


# 9 ---------------------------------------------------------------------------


def test_cli_determinism(verdict, digits, tmp_path, capsys):
    path, _, _ = digits
    ckpt = tmp_path / "net.fpk"
    assert main(["train", "--data", str(path), "--epochs", "2", "--widths", "8,8,16,16", "--out", str(ckpt)]) == 0
    (tmp_path / "c.ini").write_text("[prune]\ncriterion = random\nprune_percent = 50\nseed = 5\n")
    outputs = []
    for run in ("a", "b"):
        code = main(["prune", "--checkpoint", str(ckpt), "--data", str(path), "--config", str(tmp_path / "c.ini"),
                     "--report-dir", str(tmp_path / run)])
        assert code == 0
        outputs.append((tmp_path / run / "report.csv").read_bytes())
    capsys.readouterr()
    verdict("9 determinism", outputs[0] == outputs[1], f"report.csv byte-identical across runs ({len(outputs[0])} bytes)")


# 10 --------------------------------------------------------------------------


def test_schedule_bookkeeping(verdict, digits):
    _, train, test = digits
    net = train_from_scratch(ArchSpec("vgg-tiny", [8, 8, 16, 16]), train, 2, seed=1)
    _, no_tune = run_prune_schedule(net, PruneConfig(criterion="random", finetune_epochs=0, final_finetune_epochs=0),
                                    train, test)
    _, no_prune = run_prune_schedule(net, PruneConfig(prune_percent=0), train, test)
    ok = all(s.acc_damage == s.acc_recovery for s in no_tune.steps)
    ok = ok and no_prune.final_accuracy == no_prune.baseline_accuracy
    verdict("10 schedule bookkeeping", ok,
            f"p=q=0 damage==recovery on {len(no_tune.steps)} steps; m=0 final {no_prune.final_accuracy:.9g} "
            f"vs baseline {no_prune.baseline_accuracy:.9g}")
