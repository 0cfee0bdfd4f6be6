import csv
import re
import subprocess
import sys

import pytest

from macflow.cli import main
from macflow.config import format_config, parse_config
from macflow.exceptions import ConfigError
from macflow.trainer import TrainConfig, evaluate, load_checkpoint

TINY = """\
# tiny run for tests
strategy = mac_topk
batch_size = 16
hidden_width = 8
hidden_layers = 1
n_features = 2
epochs = 1
steps_per_epoch = 3
eval_samples = 128
eval_projections = 16
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# config files ------------------------------------------------------------------------


def test_parse_config_values():
    c = parse_config("coupling = batch_ot\nlambda = 1/50\nd_grid = 1/8, 1/4, 1/2, 1\n"
                     "target_means = -4, 0; 4, 0\nmac_full_weighting = yes\n")
    assert c.coupling == "batch_ot" and c.lam == 0.02
    assert c.d_grid == (0.125, 0.25, 0.5, 1.0)
    assert c.target_means == ((-4.0, 0.0), (4.0, 0.0)) and c.mac_full_weighting is True


def test_format_config_roundtrip():
    c = TrainConfig(coupling="mac_full", lam=0.08, seed=7, d_grid=(0.0078125, 0.5, 1.0))
    assert parse_config(format_config(c)).to_dict() == c.to_dict()


@pytest.mark.parametrize("text,key", [
    ("colour = red\n", "colour"),
    ("k = 0.3\nk = 0.4\n", "k"),
    ("k = lots\n", "k"),
    ("coupling = nearest\n", "coupling"),
    ("just words\n", "line 1"),
])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key


# train ----------------------------------------------------------------------------------


def test_train_minimal(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "metrics.csv")
    assert len(rows) == 6 and rows[0]["coupling"] == "random"
    assert parse_config((out / "config.txt").read_text()).batch_size == 16


def test_train_unknown_strategy(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(TINY.replace("mac_topk", "teleport"))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "run")]) == 2
    assert "coupling" in capsys.readouterr().err


def test_train_unknown_key_via_set(cfg, tmp_path, capsys):
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r"), "--set", "colour=red"]) == 2
    assert "colour" in capsys.readouterr().err


def test_train_replay_identical(cfg, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_train_refuses_overwrite(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    before = (out / "metrics.csv").read_bytes()
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "9"]) == 2
    assert (out / "metrics.csv").read_bytes() == before
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "9", "--force"]) == 0
    assert (out / "metrics.csv").read_bytes() != before


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numerical_abort(cfg, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--config", str(cfg), "--out", str(out), "--set", "target_means=1e200, 0",
                 "--set", "target_weights=1"])
    assert code == 3
    assert "numerical abort" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_bad_arguments(capsys):
    assert main(["train"]) == 2
    assert main(["launch"]) == 2


# eval -------------------------------------------------------------------------------------


@pytest.fixture
def run_dir(cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return out


def test_eval_rows(run_dir, capsys):
    assert main(["eval", "--run", str(run_dir), "--steps", "1,4,128"]) == 0
    rows = read_csv(run_dir / "eval.csv")
    assert [r["n_steps"] for r in rows] == ["1", "4", "128"]
    state, config = load_checkpoint(run_dir / "checkpoint_epoch001.ckpt")
    fresh = evaluate(state, config, (1, 4, 128), model="run")
    for got, want in zip(rows, fresh):
        assert float(got["w2"]) == want["w2"]
        assert got["straightness"] == repr(want["straightness"])
        assert got["model"] == "run" and got["strategy"] == "mac_topk"


def test_eval_empty_steps(run_dir, capsys):
    assert main(["eval", "--run", str(run_dir), "--steps", ""]) == 2
    assert main(["eval", "--run", str(run_dir), "--steps", "0"]) == 2


def test_eval_refuses_overwrite(run_dir, capsys):
    assert main(["eval", "--run", str(run_dir), "--steps", "1"]) == 0
    assert main(["eval", "--run", str(run_dir), "--steps", "1"]) == 2
    assert main(["eval", "--run", str(run_dir), "--steps", "1,2", "--force"]) == 0


def test_eval_missing_run(tmp_path, capsys):
    assert main(["eval", "--run", str(tmp_path / "ghost")]) == 2


# compare ------------------------------------------------------------------------------------


def _two_runs(cfg, tmp_path):
    runs = []
    for strategy in ("batch_ot", "mac_topk"):
        out = tmp_path / strategy
        assert main(["train", "--config", str(cfg), "--out", str(out), "--set", f"coupling={strategy}"]) == 0
        runs.append(str(out))
    return runs


def test_compare_figures(cfg, tmp_path, capsys):
    runs = _two_runs(cfg, tmp_path)
    a, b = tmp_path / "cmp_a", tmp_path / "cmp_b"
    args = ["--runs", *runs, "--n-points", "64", "--n-pairs", "16", "--steps", "1,4"]
    assert main(["compare", *args, "--out", str(a)]) == 0
    assert main(["compare", *args, "--out", str(b)]) == 0
    for name in ("samples.svg", "couplings.svg"):
        svg = (a / name).read_text()
        assert svg.count('class="panel"') == 2
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len(read_csv(a / "eval.csv")) == 4


def test_compare_segments_match_dump(cfg, tmp_path, capsys):
    runs = _two_runs(cfg, tmp_path)
    out = tmp_path / "cmp"
    assert main(["compare", "--runs", *runs, "--n-points", "32", "--n-pairs", "10", "--out", str(out)]) == 0
    svg = (out / "couplings.svg").read_text()
    lines = re.findall(r'<line x1="([^"]+)" y1="([^"]+)" x2="([^"]+)" y2="([^"]+)"', svg)
    dump = read_csv(out / "couplings.csv")
    assert len(lines) == len(dump) == 20
    for seg, row in zip(lines, dump):
        assert [float(v) for v in seg] == [float(row[k]) for k in ("x0_0", "x0_1", "x1_0", "x1_1")]


# sweep -------------------------------------------------------------------------------------


def test_sweep_lambda(cfg, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--param", "lam", "--values", "0,0.02,0.08",
                 "--steps", "1,4", "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [r["value"] for r in rows] == ["0", "0", "0.02", "0.02", "0.08", "0.08"]
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["lam=0", "lam=0.02", "lam=0.08"]
    # equivalent to launching the middle value by hand
    single = tmp_path / "single"
    assert main(["train", "--config", str(cfg), "--out", str(single), "--set", "lam=0.02"]) == 0
    assert (single / "metrics.csv").read_bytes() == (out / "lam=0.02" / "metrics.csv").read_bytes()
    assert main(["eval", "--run", str(single), "--steps", "1,4"]) == 0
    by_hand = read_csv(single / "eval.csv")
    assert [r["w2"] for r in by_hand] == [r["w2"] for r in rows[2:4]]


def test_sweep_single_value(cfg, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--param", "k", "--values", "0.5", "--steps", "1",
                 "--out", str(out)]) == 0
    assert len(read_csv(out / "sweep.csv")) == 1


def test_sweep_bad_value(cfg, tmp_path, capsys):
    assert main(["sweep", "--config", str(cfg), "--param", "k", "--values", "0.5,7",
                 "--out", str(tmp_path / "s")]) == 2
    assert not (tmp_path / "s").exists()


def test_sweep_parallel_matches_serial(cfg, tmp_path, capsys, monkeypatch):
    base = ["sweep", "--config", str(cfg), "--param", "seed", "--values", "1,2", "--steps", "1"]
    assert main([*base, "--out", str(tmp_path / "serial")]) == 0
    monkeypatch.setenv("MACFLOW_NUM_THREADS", "2")
    assert main([*base, "--out", str(tmp_path / "parallel")]) == 0
    assert (tmp_path / "serial" / "sweep.csv").read_text().replace("serial", "") == \
        (tmp_path / "parallel" / "sweep.csv").read_text().replace("parallel", "")


def test_module_entry_point(cfg, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "macflow.cli", "train", "--config", str(cfg),
                           "--out", str(tmp_path / "r")], capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "r" / "metrics.csv").exists()
