import json
import subprocess
import sys

import pytest

from lookalike.cli import cli_main, describe
from lookalike.config import DEFAULTS, ConfigError, format_defaults, load_config

SMALL_GEN = ["gen-data", "--customers", "300", "--categories", "6", "--archetypes", "3", "--days", "0:120"]
SMALL_TRAIN = [
    "train", "--epochs", "2", "--pairs", "2000", "--eval-pairs", "200",
    "--hidden-dims", "32", "--embedding-dim", "16", "--train-window", "0:90", "--eval-window", "90:120",
]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def pipeline_dir(workdir):
    assert cli_main(["--seed", "3"] + SMALL_GEN) == 0
    assert cli_main(SMALL_TRAIN + ["--seed", "3"]) == 0
    assert cli_main(["offline"]) == 0
    return workdir / "lookalike_data"


def test_no_args_is_usage(capsys):
    assert cli_main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_subcommand(capsys):
    assert cli_main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_bad_global_flags(capsys):
    assert cli_main(["--threads", "0", "inspect", "--defaults"]) == 1
    assert cli_main(["--seed", "-1", "inspect", "--defaults"]) == 1


def test_smoke_pipeline(pipeline_dir, capsys):
    d = pipeline_dir
    for name in ("universe.jsonl", "word_vectors.txt", "schema.json", "model.lkem",
                 "embeddings.lkev", "index.lkix", "skipped.txt"):
        assert (d / name).exists(), name
    assert cli_main(["expand", "--seeds", "1,2,3", "--output-size", "25", "--format", "json"]) == 0
    result = json.loads((d / "expansion.json").read_text())
    ids = [e["customer_id"] for e in result["entries"]]
    assert len(ids) == 25 and not {1, 2, 3} & set(ids)
    assert result["metadata"]["elapsed_ms"] is None
    capsys.readouterr()
    assert cli_main(["inspect", str(d / "expansion.json")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["kind"] == "expansion_result" and info["entries"] == 25


def test_inspect_artifacts(pipeline_dir):
    assert describe(pipeline_dir / "model.lkem")["embedding_dim"] == 16
    assert describe(pipeline_dir / "embeddings.lkev")["count"] == 300
    idx = describe(pipeline_dir / "index.lkix")
    assert idx["kind"] == "index" and idx["count"] == 300


def test_expand_stdout_csv_filter_and_determinism(pipeline_dir, capsys):
    capsys.readouterr()
    args = ["expand", "--seeds", "5", "--output-size", "40", "--out", "-", "--filter", "gender=f"]
    assert cli_main(args) == 0
    first = capsys.readouterr().out
    assert cli_main(args) == 0
    assert capsys.readouterr().out == first
    universe = {}
    for line in (pipeline_dir / "universe.jsonl").read_text().splitlines():
        o = json.loads(line)
        universe[o["customer_id"]] = o
    for e in json.loads(first)["entries"]:
        assert universe[e["customer_id"]]["demographics"]["gender"] == "f"
    assert cli_main(["expand", "--seeds", "5", "--format", "csv", "--out", "-"]) == 0
    assert capsys.readouterr().out.startswith("customer_id,score,best_seed_id\n")


def test_expand_errors(pipeline_dir):
    assert cli_main(["expand", "--seeds", "999999"]) == 2
    assert cli_main(["expand", "--seeds", "1", "--filter", "gender"]) == 1
    assert cli_main(["expand", "--seeds", "1", "--nprobe", "100000"]) == 1


def test_expand_defaults_to_first_embeddings(pipeline_dir):
    assert cli_main(["expand", "--output-size", "10"]) == 0
    meta = json.loads((pipeline_dir / "expansion.json").read_text())["metadata"]
    assert len(meta["request"]["seed_ids"]) == 10


def test_offline_missing_model(workdir):
    assert cli_main(SMALL_GEN) == 0
    assert cli_main(["offline", "--model", "missing.lkem"]) == 2
    assert not (workdir / "lookalike_data" / "index.lkix").exists()


def test_missing_universe_is_data_error(workdir):
    assert cli_main(["train", "--universe", "nope.jsonl"]) == 2


def test_corrupt_index_is_data_error(pipeline_dir):
    p = pipeline_dir / "index.lkix"
    p.write_bytes(p.read_bytes()[:100])
    assert cli_main(["expand", "--seeds", "1"]) == 2


def test_config_file_overrides(workdir):
    (workdir / "c.toml").write_text('[paths]\nworkdir = "elsewhere"\n[data]\ncustomers = 40\n')
    assert cli_main(["gen-data", "--config", "c.toml", "--categories", "4", "--archetypes", "2"]) == 0
    assert len((workdir / "elsewhere" / "universe.jsonl").read_text().splitlines()) == 40
    (workdir / "bad.toml").write_text("[data]\ncustomerz = 1\n")
    assert cli_main(["--config", "bad.toml", "inspect", "--defaults"]) == 1


def test_load_config():
    assert load_config(None) == DEFAULTS
    with pytest.raises(ConfigError):
        load_config("/nonexistent/x.toml")


def test_defaults_roundtrip(tmp_path, capsys):
    assert cli_main(["inspect", "--defaults"]) == 0
    text = capsys.readouterr().out
    assert text == format_defaults()
    (tmp_path / "d.toml").write_text(text)
    assert load_config(tmp_path / "d.toml") == DEFAULTS


def test_evaluate_small(workdir, capsys):
    assert cli_main(SMALL_GEN) == 0
    capsys.readouterr()
    args = ["evaluate", "--seeds", "1", "--epochs", "1", "--pairs", "500", "--eval-pairs", "100",
            "--format", "json"]
    # Windows live in the config; point them inside the 120-day universe.
    (workdir / "w.toml").write_text('[similarity]\ntrain_window = "0:90"\neval_window = "90:120"\n'
                                    '[train]\nembedding_dim = 8\n')
    assert cli_main(args + ["--config", "w.toml"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 4 and rows[0]["relative_pct"] == 100.0


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "lookalike", "inspect", "--defaults"],
                         capture_output=True, text=True, cwd=tmp_path)
    assert out.returncode == 0 and "[index]" in out.stdout
    out = subprocess.run([sys.executable, "-m", "lookalike"], capture_output=True, text=True, cwd=tmp_path)
    assert out.returncode == 1


def test_offline_with_skips_exit_code(workdir):
    import numpy as np

    from lookalike.customer_data import CustomerRecord, save_customers
    from lookalike.features import FeatureSchema, fit_normalizer
    from lookalike.model import MlpParams, ModelBundle, save_model

    recs = [CustomerRecord(i, dense_stats={"order_count": float(i)}) for i in range(12)]
    schema = FeatureSchema(("order_count",), ())
    params = MlpParams([(np.array([[1.0]]), np.zeros(1)), (np.ones((2, 1)), np.zeros(2))])
    save_customers(recs, workdir / "u.jsonl")
    save_model(ModelBundle(params, schema, fit_normalizer(recs, schema)), workdir / "m.lkem")
    code = cli_main(["offline", "--universe", "u.jsonl", "--model", "m.lkem", "--out-dir", "o", "--nlist", "1"])
    assert code == 4
    assert (workdir / "o" / "skipped.txt").read_text().split() == [str(i) for i in range(6)]
