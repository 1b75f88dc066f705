import json

import numpy as np
import pytest
import yaml

from e2crf import __version__
from e2crf.cli import main
from e2crf.config import RunConfig


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--generator", "ar1", "--count", "16", "--n", "16",
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--epochs", "2",
                 "--set", "train.warmup_epochs=1", "--out", str(root / "model")]) == 0
    return root


def read_config(path):
    text = path.read_text()
    assert text.splitlines()[0] == f"# e2crf {__version__}"
    return RunConfig.from_dict(yaml.safe_load(text))


def test_gen_data_layout(trained):
    d = trained / "data"
    man = json.loads((d / "manifest.json").read_text())
    assert man["count"] == 16 and man["n"] == 16 and man["m"] == 1 and man["seed"] == 0
    assert read_config(d / "config.yaml").data.generator == "ar1"


def test_gen_data_reproducible_and_empty(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--count", "3", "--n", "8", "--seed", "5",
                     "--out", str(tmp_path / name)]) == 0
    for f in ("sample_00000.csv", "manifest.json", "config.yaml"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["gen-data", "--count", "0", "--n", "8", "--out", str(tmp_path / "e")]) == 0
    man = json.loads((tmp_path / "e" / "manifest.json").read_text())
    assert man["files"] == [] and man["n"] == 8


def test_existing_output_needs_force(trained):
    assert main(["gen-data", "--count", "2", "--out", str(trained / "data")]) == 2


def test_train_usage_errors(tmp_path):
    assert main(["train", "--out", str(tmp_path / "m")]) == 2
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) == 2


def test_train_outputs(trained):
    m = trained / "model"
    for f in ("model.npz", "train_state.npz", "standardization.json", "history.json",
              "config.yaml"):
        assert (m / f).exists()
    assert len(json.loads((m / "history.json").read_text())) == 2


def test_sample_degeneracy_through_cli(trained):
    common = ["sample", "--checkpoint", str(trained / "model"), "--steps", "10",
              "--n-samples", "2", "--seed", "4"]
    assert main(common + ["--policy", "baseline", "--out", str(trained / "sb")]) == 0
    assert main(common + ["--policy", "e2crf", "--k-low", "max", "--out",
                          str(trained / "se")]) == 0
    a = np.load(trained / "sb" / "samples.npz")
    b = np.load(trained / "se" / "samples.npz")
    assert np.array_equal(a["phi"], b["phi"])
    for j in range(2):
        name = f"sample_{j:05d}.csv"
        assert ((trained / "sb" / "samples" / "time" / name).read_bytes()
                == (trained / "se" / "samples" / "time" / name).read_bytes())
    rows = (trained / "sb" / "trace.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 10
    assert read_config(trained / "se" / "config.yaml").cache.k_low == 8


def test_sample_errors(trained, tmp_path):
    assert main(["sample", "--out", str(tmp_path / "x")]) == 2
    assert main(["sample", "--checkpoint", str(trained / "model"), "--k-low", "20",
                 "--out", str(tmp_path / "y")]) == 2
    assert main(["sample", "--analytic-dirac", "--policy", "e2crf",
                 "--out", str(tmp_path / "z")]) == 2
    assert main(["sample", "--checkpoint", str(tmp_path / "missing.npz"),
                 "--out", str(tmp_path / "w")]) == 4
    assert main(["sample", "--policy", "bogus", "--out", str(tmp_path / "v")]) == 2


def test_sample_analytic_dirac(tmp_path):
    assert main(["sample", "--analytic-dirac", "--policy", "baseline", "--n", "8",
                 "--steps", "50", "--n-samples", "2", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "samples" / "freq" / "sample_00001.csv").exists()


def test_bench_table_and_sweep(trained):
    out = trained / "bench"
    assert main(["bench", "--checkpoint", str(trained / "model"), "--steps", "5",
                 "--n-samples", "2", "--n-proj", "20", "--set", "eval.reference_count=8",
                 "--out", str(out)]) == 0
    rows = json.loads((out / "bench.json").read_text())["rows"]
    assert [r["policy"] for r in rows] == ["baseline", "e2crf", "fixed_schedule", "naive",
                                           "e2crf_no_feedback"]
    assert rows[0]["quality_change_pct"] == 0.0
    header = (out / "bench.csv").read_text().splitlines()[0]
    assert header.startswith("policy,speedup")
    out2 = trained / "sweep"
    assert main(["bench", "--checkpoint", str(trained / "model"), "--steps", "5",
                 "--n-samples", "1", "--no-quality", "--policies", "baseline",
                 "--sweep", "1,2:5,10,20", "--out", str(out2)]) == 0
    rows = json.loads((out2 / "bench.json").read_text())["rows"]
    assert len(rows) == 1 + 2 * 3


def test_eval_self_and_mismatch(trained, tmp_path):
    assert main(["eval", str(trained / "data"), str(trained / "data"),
                 "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert rep["sw_time_text"] == "0.000 ± 0.000"
    assert main(["gen-data", "--count", "2", "--n", "10", "--out", str(tmp_path / "o")]) == 0
    assert main(["eval", str(trained / "data"), str(tmp_path / "o"),
                 "--out", str(tmp_path / "r2")]) == 2


def test_version_flag(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out
