import json
import os

import pytest

from ovseg import cli
from ovseg.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_OK, MissingArtifactError, main

TINY = [
    "--set", "data.n_train=3",
    "--set", "data.n_val=2",
    "--set", "data.image_size=32",
    "--set", "sw.window=16",
]


@pytest.fixture()
def out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("OVSEG_OUT", str(tmp_path))
    return tmp_path


def run(*args):
    return main(list(args))


class TestExitCodes:
    def test_gen_data_ok(self, out_dir):
        assert run(*TINY, "gen-data") == EXIT_OK

    def test_unknown_config_key(self, out_dir):
        assert run("--set", "vlm.lr_schedual=0.1", "gen-data") == EXIT_CONFIG

    def test_invalid_value(self, out_dir):
        assert run("--set", "ensemble_lambda=3.0", "gen-data") == EXIT_CONFIG

    def test_missing_config_file(self, out_dir):
        assert run("--config", str(out_dir / "nope.json"), "gen-data") == EXIT_CONFIG

    def test_pretrain_without_data(self, out_dir):
        assert run(*TINY, "pretrain") == EXIT_MISSING

    def test_eval_without_checkpoints(self, out_dir):
        assert run(*TINY, "gen-data") == EXIT_OK
        assert run(*TINY, "eval") == EXIT_MISSING

    def test_numeric_failure_maps_to_4(self, out_dir, monkeypatch, capsys):
        from ovseg.vlm import DivergenceError

        def boom(args, config, run_dir):
            raise DivergenceError("loss became non-finite at step 3")

        monkeypatch.setitem(cli._COMMANDS, "pretrain", boom)
        assert run(*TINY, "pretrain") == EXIT_NUMERIC
        assert "numerical failure" in capsys.readouterr().err

    def test_undefined_metric_maps_to_4(self, out_dir, monkeypatch):
        from ovseg.evaluation import UndefinedMetricError

        def boom(args, config, run_dir):
            raise UndefinedMetricError("no class has support")

        monkeypatch.setitem(cli._COMMANDS, "eval", boom)
        assert run(*TINY, "eval") == EXIT_NUMERIC

    def test_missing_artifact_message_names_producer(self, out_dir, capsys):
        run(*TINY, "pretrain")
        err = capsys.readouterr().err
        assert "gen-data" in err


class TestRunDirectory:
    def test_resolved_config_written(self, out_dir):
        run(*TINY, "gen-data")
        runs = list(out_dir.iterdir())
        assert len(runs) == 1
        doc = json.loads((runs[0] / "resolved_config.json").read_text())
        assert doc["data"]["n_train"] == 3

    def test_same_config_reuses_directory(self, out_dir):
        run(*TINY, "gen-data")
        run(*TINY, "gen-data")
        assert len(list(out_dir.iterdir())) == 1

    def test_functional_change_gets_new_directory(self, out_dir):
        run(*TINY, "gen-data")
        run(*TINY, "--set", "seed=7", "gen-data")
        assert len(list(out_dir.iterdir())) == 2

    def test_threads_do_not_change_directory(self, out_dir):
        run(*TINY, "gen-data")
        run(*TINY, "--threads", "2", "gen-data")
        assert len(list(out_dir.iterdir())) == 1

    def test_thread_env_set(self, out_dir, monkeypatch):
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        run(*TINY, "--threads", "3", "gen-data")
        assert os.environ["OMP_NUM_THREADS"] == "3"

    def test_dataset_layout(self, out_dir):
        run(*TINY, "gen-data")
        run_dir = next(out_dir.iterdir())
        assert (run_dir / "data" / "domain_a" / "vocab.json").exists()
        assert (run_dir / "data" / "domain_b" / "vocab.json").exists()
        log = json.loads((run_dir / "logs" / "gen_data.json").read_text())
        assert log["n_train"] == 3
        assert log["n_val_b"] == 2


class TestHelpers:
    def test_require_passes_through_existing(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text("{}")
        assert cli._require(p, "gen-data") == p

    def test_require_raises_with_producer_hint(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="train-fcn"):
            cli._require(tmp_path / "fcn.json", "train-fcn")

    def test_ensemble_lambda_flag(self, out_dir):
        assert run(*TINY, "--ensemble-lambda", "0.75", "gen-data") == EXIT_OK
        doc = json.loads((next(out_dir.iterdir()) / "resolved_config.json").read_text())
        assert doc["ensemble_lambda"] == 0.75
