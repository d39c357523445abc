import pytest

from filterprune.cli import EXIT_CODES, main
from filterprune.config import ConfigError, format_config, load_config, parse_prune_percent
from filterprune.pipeline import PruneConfig


def call(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestConfig:
    def test_parse_and_override(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[prune]\ncriterion = apoz  ; comment\nprune_percent = conv2:25, conv3:50\n"
                        "skip_layers = conv1, conv4\nlr = 0.05\n", encoding="utf-8")
        cfg = load_config(path, {"seed": "9", "lr": "0.5"})
        assert cfg.criterion == "apoz" and cfg.prune_percent == {"conv2": 25, "conv3": 50}
        assert cfg.skip_layers == ["conv1", "conv4"] and cfg.seed == 9 and cfg.lr == 0.5

    def test_round_trip(self, tmp_path):
        cfg = PruneConfig(criterion="class-specific", class_set=[1, 4], prune_percent={"conv3": 30},
                          differential_budget=None, data_fraction=0.25)
        path = tmp_path / "c.ini"
        path.write_text(format_config(cfg), encoding="utf-8")
        assert load_config(path) == cfg

    def test_errors(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[prune]\ncolour = red\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="colour"):
            load_config(path)
        path.write_text("[other]\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.ini")
        assert parse_prune_percent(" 40 ") == 40


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["ingest", "synthetic", "--out", str(d / "d.fpk"), "--images", "200", "--size", "8"]) == 0
    assert main(["train", "--data", str(d / "d.fpk"), "--widths", "4,4,6,6", "--hidden", "12",
                 "--epochs", "2", "--out", str(d / "n.fpk")]) == 0
    (d / "c.ini").write_text("[prune]\ncriterion = l1-norm\nprune_percent = 50\nfinal_finetune_epochs = 1\n")
    return d


def test_full_flow(capsys, workspace):
    d = workspace
    code, out, _ = call(capsys, "eval", "--checkpoint", d / "n.fpk", "--data", d / "d.fpk")
    assert code == 0 and 0 <= float(out) <= 1
    code, out, _ = call(capsys, "prune", "--checkpoint", d / "n.fpk", "--data", d / "d.fpk", "--config", d / "c.ini",
                        "--criterion", "random", "--seed", "2", "--out", d / "p.fpk", "--report-dir", d / "r")
    assert code == 0 and "final" in out
    summary = (d / "r" / "summary.txt").read_text()
    assert '"criterion": "random"' in summary and '"seed": 2' in summary
    code, out, _ = call(capsys, "report", f"a={d / 'r' / 'report.csv'}")
    assert code == 0 and out.splitlines()[0] == "layer_id,a"
    code, out, _ = call(capsys, "costs", "--checkpoint", d / "p.fpk")
    assert code == 0 and out.splitlines()[-1].startswith("total,")
    code, out, _ = call(capsys, "stats", "--checkpoint", d / "n.fpk", "--data", d / "d.fpk", "--out", d / "s.fpk")
    assert code == 0 and len(out.splitlines()) == 5
    code, out, _ = call(capsys, "subset", "--data", d / "d.fpk", "--classes", "1,2", "--out", d / "sub.fpk")
    assert code == 0


def test_prune_is_byte_reproducible(capsys, workspace):
    d = workspace
    for name in ("x", "y"):
        assert call(capsys, "prune", "--checkpoint", d / "n.fpk", "--data", d / "d.fpk", "--config", d / "c.ini",
                    "--report-dir", d / name, "--out", d / f"{name}.fpk")[0] == 0
    assert (d / "x" / "report.csv").read_bytes() == (d / "y" / "report.csv").read_bytes()
    assert (d / "x.fpk").read_bytes() == (d / "y.fpk").read_bytes()


def test_gradcheck(capsys):
    code, out, _ = call(capsys, "gradcheck", "--family", "resnet-tiny", "--widths", "4,3,3,4", "--examples", "2")
    assert code == 0 and float(out.split()[-1]) < 1e-4


@pytest.mark.parametrize("family", ["vgg-tiny", "resnet-tiny"])
def test_gradcheck_default_widths_fit_family(capsys, family):
    code, out, _ = call(capsys, "gradcheck", "--family", family, "--examples", "1")
    assert code == 0 and float(out.split()[-1]) < 1e-4


@pytest.mark.parametrize("argv,category", [
    (["eval", "--checkpoint", "missing.fpk", "--data", "missing.fpk"], "io"),
    (["prune", "--checkpoint", "n.fpk", "--data", "d.fpk", "--prune-percent", "150"], "config"),
    (["prune", "--checkpoint", "n.fpk", "--data", "d.fpk", "--config", "none.ini"], "config"),
    (["eval", "--checkpoint", "d.fpk", "--data", "d.fpk"], "checkpoint"),
    (["eval", "--checkpoint", "n.fpk", "--data", "n.fpk"], "data"),
    (["subset", "--data", "d.fpk", "--classes", "3,3", "--out", "s.fpk"], "data"),
    (["ingest", "mnist", "--out", "m.fpk"], "usage"),
])
def test_error_categories(capsys, workspace, monkeypatch, argv, category):
    monkeypatch.chdir(workspace)
    code, _, err = call(capsys, *argv)
    assert code == EXIT_CODES[category] != 0
    assert err.startswith(f"error[{category}]: ")


def test_thread_env(capsys, workspace, monkeypatch):
    monkeypatch.setenv("FILTERPRUNE_THREADS", "1")
    assert call(capsys, "eval", "--checkpoint", workspace / "n.fpk", "--data", workspace / "d.fpk")[0] == 0
    monkeypatch.setenv("FILTERPRUNE_THREADS", "zero")
    code, _, err = call(capsys, "eval", "--checkpoint", workspace / "n.fpk", "--data", workspace / "d.fpk")
    assert code == EXIT_CODES["usage"] and "FILTERPRUNE_THREADS" in err


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
