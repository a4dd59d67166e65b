import json
import os

import pytest

from main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, main
from models.config import load_run_config
from models.errors import ConfigError
from models.reports import AblationGrid


@pytest.fixture
def config_file(tmp_path, tiny_run_config):
    path = tmp_path / "run.json"
    path.write_text(tiny_run_config.model_dump_json())
    return str(path)


def test_every_subcommand_is_registered():
    _, handlers = build_parser()
    assert set(handlers) == {"gen-data", "pretrain", "train", "transfer", "eval", "ablate", "report", "gradcheck"}


def test_unknown_subcommand(tmp_path):
    assert main(["--out", str(tmp_path), "frobnicate"]) == EXIT_USAGE


def test_no_subcommand():
    assert main([]) == EXIT_USAGE


def test_train_without_generators(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_config_file(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == EXIT_USAGE


def test_eval_without_checkpoint(tmp_path):
    assert main(["eval", "--out", str(tmp_path)]) == EXIT_USAGE


def test_report_without_ablation(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_FAILURE


def test_report_with_malformed_summary(tmp_path):
    (tmp_path / "ablation").mkdir()
    (tmp_path / "ablation" / "summary.json").write_text("{not json")
    assert main(["report", "--out", str(tmp_path)]) == EXIT_FAILURE


def test_report_with_malformed_epoch_log(tmp_path):
    row_dir = tmp_path / "ablation" / "ONLY_joint" / "seed0"
    row_dir.mkdir(parents=True)
    (tmp_path / "ablation" / "summary.json").write_text(AblationGrid(seeds=[0]).model_dump_json())
    (row_dir / "metrics.jsonl").write_text('{"epoch": "first"}\n')
    assert main(["report", "--out", str(tmp_path)]) == EXIT_FAILURE


def test_gen_data(tmp_path, config_file):
    out = str(tmp_path / "runs")
    assert main(["gen-data", "--config", config_file, "--out", out, "--seed", "5"]) == EXIT_OK
    with open(os.path.join(out, "corpus", "manifest.jsonl")) as f:
        header = json.loads(f.readline()[1:])
    assert header["corpus_seed"] == 5


def test_gradcheck_needs_64_samples(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path), "--samples", "8"]) == EXIT_USAGE
    assert not (tmp_path / "gradcheck.json").exists()


@pytest.mark.slow
def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path), "--samples", "64"]) == EXIT_OK
    with open(tmp_path / "gradcheck.json") as f:
        reports = json.load(f)
    assert all(r["passed"] for r in reports)


class TestRunConfig:

    def test_seed_override(self):
        config = load_run_config(seed=9)
        assert config.corpus.seed == 9 and config.train.seed == 9

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
        with pytest.raises(ConfigError):
            load_run_config(str(path))

    def test_image_sizes_must_agree(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"model": {"image_size": 32}}))
        with pytest.raises(ConfigError, match="image_size"):
            load_run_config(str(path))


@pytest.mark.slow
def test_pipeline_commands(tmp_path, config_file):
    out = str(tmp_path / "runs")
    base = ["--config", config_file, "--out", out]
    assert main(["gen-data", *base]) == EXIT_OK
    assert main(["pretrain", *base]) == EXIT_OK
    assert os.path.exists(os.path.join(out, "pretrain", "psnr.json"))
    assert main(["train", *base]) == EXIT_OK
    assert main(["eval", *base]) == EXIT_OK
    assert main(["transfer", *base, "--generators", os.path.join(out, "pretrain", "generators.g2c")]) == EXIT_OK
    assert os.path.exists(os.path.join(out, "transfer", "metric_report.json"))
