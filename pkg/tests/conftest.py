import numpy as np
import pytest

from filterprune.datasets import Dataset, load_dataset, make_synthetic, save_dataset
from filterprune.netgraph import ArchSpec, build_model


def naive_conv(x, w, b):
    """Loop-based same-padded stride-1 convolution (cross-correlation)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
    xp[:, :, ph : ph + h, pw : pw + wd] = x
    out = np.zeros((n, o, h, wd))
    for i in range(n):
        for f in range(o):
            for y in range(h):
                for z in range(wd):
                    out[i, f, y, z] = np.sum(xp[i, :, y : y + kh, z : z + kw] * w[f]) + b[f]
    return out


def tiny_vgg(seed=0, widths=(4, 4, 6, 6), size=8, classes=10, dtype=np.float64, hidden=12):
    return build_model(ArchSpec("vgg-tiny", list(widths), (1, size, size), classes, hidden), seed, dtype)


def tiny_resnet(seed=0, widths=(4, 3, 3, 4, 5, 2, 4), size=8, classes=10, dtype=np.float64, hidden=12):
    return build_model(ArchSpec("resnet-tiny", list(widths), (1, size, size), classes, hidden), seed, dtype)


def toy_dataset(n=40, classes=10, size=8, seed=0, dtype=np.float32, split="train"):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, 1, size, size)).astype(dtype), np.arange(n) % classes, split,
                   [str(k) for k in range(classes)])


@pytest.fixture(scope="session")
def synthetic_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "synthetic.fpk"
    save_dataset(make_synthetic(seed=3, n_images=300, shape=(1, 8, 8)), path)
    return path


@pytest.fixture(scope="session")
def synthetic_splits(synthetic_file):
    return load_dataset(synthetic_file, "train"), load_dataset(synthetic_file, "eval")


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line, then assert it."""

    def check(label: str, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {label}: {detail}")
        assert ok, f"{label}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
