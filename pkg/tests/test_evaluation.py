import os
from math import comb

import numpy as np
import pytest

from evaluation.ablation import (
    VARIANTS,
    evaluate,
    grid_rows,
    pairwise_significance,
    render_table,
    row_configs,
    run_ablation,
    summarize,
)
from evaluation.metrics import (
    PSNR_CAP,
    balanced_accuracy,
    confusion_matrix,
    f1_binary,
    metric_report,
    psnr,
    psnr_fidelity,
    significance_test,
)
from evaluation.report import read_epoch_log, write_report
from models.config import GridConfig, RunConfig
from models.errors import ConfigError, EvaluationError
from models.reports import AblationGrid, EpochRecord, MetricReport, RowResult
from storage import cache
from synth.dataset import PatchSet


class FixedModel:
    """Returns canned predictions; stands in for a trained G2CModel"""

    def __init__(self, predictions, class_names):
        self.predictions = np.asarray(predictions)
        self.class_names = class_names

    def predict(self, images):
        return self.predictions[:len(images)]


def exact_mcnemar(b, c):
    """Two-sided exact p by enumerating every outcome at most as likely as b"""
    n = b + c
    probs = [comb(n, k) / 2 ** n for k in range(n + 1)]
    return min(1.0, sum(p for p in probs if p <= probs[b] * (1 + 1e-9)))


# =============================================================================
# Metrics
# =============================================================================

class TestMetrics:

    def test_balanced_accuracy_hand_example(self):
        assert balanced_accuracy([[90, 10], [50, 50]]) == pytest.approx(0.7)

    def test_constant_predictor(self):
        labels = [0] * 90 + [1] * 10
        confusion = confusion_matrix(labels, [0] * 100, 2)
        assert balanced_accuracy(confusion) == pytest.approx(0.5)

    def test_empty_class(self):
        with pytest.raises(EvaluationError):
            balanced_accuracy([[5, 0], [0, 0]])

    def test_f1(self):
        assert f1_binary([[100, 20], [20, 80]]) == pytest.approx(0.8)
        assert f1_binary([[10, 0], [0, 10]]) == 1.0
        assert f1_binary([[10, 0], [5, 0]]) == 0.0

    def test_report_accounts_for_every_record(self):
        report = metric_report([0, 0, 1, 1, 1], [0, 1, 1, 1, 0], ["gs", "ss"])
        assert report.n == 5
        assert sum(map(sum, report.confusion)) == 5
        assert report.per_class_recall == {"gs": 0.5, "ss": pytest.approx(2 / 3)}
        assert report.f1 is not None
        three = metric_report([0, 1, 2], [0, 1, 2], ["noa", "gs", "ss"])
        assert three.f1 is None and three.balanced_accuracy == 1.0


class TestSignificance:

    @staticmethod
    def _pairs(b, c, both=10):
        labels = np.zeros(both + b + c, dtype=int)
        preds_a = np.concatenate([np.zeros(both + b), np.ones(c)]).astype(int)
        preds_b = np.concatenate([np.zeros(both), np.ones(b), np.zeros(c)]).astype(int)
        return preds_a, preds_b, labels

    def test_hand_example(self):
        p = significance_test(*self._pairs(1, 9))
        assert p == pytest.approx(22 / 1024)
        assert p == pytest.approx(0.0215, abs=1e-4)

    @pytest.mark.parametrize("b, c", [(0, 5), (3, 4), (2, 11), (7, 7)])
    def test_matches_enumeration(self, b, c):
        assert significance_test(*self._pairs(b, c)) == pytest.approx(exact_mcnemar(b, c))

    def test_symmetric(self):
        a, b, labels = self._pairs(2, 8)
        assert significance_test(a, b, labels) == pytest.approx(significance_test(b, a, labels))

    def test_identical_predictions(self):
        preds = [0, 1, 1, 0]
        assert significance_test(preds, preds, [0, 1, 0, 0]) == 1.0

    def test_misaligned(self):
        with pytest.raises(EvaluationError):
            significance_test([0, 1], [0], [0, 1])


class TestPsnr:

    def test_exact_translation_hits_cap(self, rng):
        images = rng.uniform(0, 1, (3, 3, 4, 4))
        assert psnr_fidelity(lambda x: x.copy(), images, images) == PSNR_CAP

    def test_identity_matches_direct_computation(self, rng):
        sources = rng.uniform(0, 1, (3, 3, 4, 4))
        targets = np.clip(sources + 0.1, 0, 1)
        expected = np.mean([psnr(s, t) for s, t in zip(sources, targets)])
        assert psnr_fidelity(lambda x: x, sources, targets) == pytest.approx(expected)

    def test_known_mse(self):
        assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0)

    def test_empty_pairs(self):
        with pytest.raises(EvaluationError):
            psnr_fidelity(lambda x: x, np.zeros((0, 3, 4, 4)), np.zeros((0, 3, 4, 4)))


# =============================================================================
# Evaluation and grid bookkeeping
# =============================================================================

class TestEvaluate:

    @pytest.fixture
    def split(self):
        return PatchSet(images=np.zeros((6, 3, 4, 4)), labels=np.array([0, 0, 0, 1, 1, 1]), class_names=["gs", "ss"])

    def test_filter_only_shrinks_the_subset(self, split):
        model = FixedModel([0, 1, 0, 1, 1, 0], ["gs", "ss"])
        level1 = FixedModel([1, 1, 0, 1, 1, 1], ["noa", "s"])
        full = evaluate(model, split)
        filtered = evaluate(model, split, filter_correct_level1=True, level1_model=level1)
        assert full.n == 6 and filtered.n == 5
        # patch 2 is dropped; everything else keeps its prediction
        assert np.array(filtered.confusion).tolist() == [[1, 1], [1, 2]]

    def test_filter_needs_level1_model(self, split):
        with pytest.raises(EvaluationError):
            evaluate(FixedModel([0] * 6, ["gs", "ss"]), split, filter_correct_level1=True)


def _report(bacc):
    return MetricReport(class_names=["gs", "ss"], per_class_recall={"gs": bacc, "ss": bacc},
                        balanced_accuracy=bacc, confusion=[[1, 0], [0, 1]], n=2)


def _result(row, seed, train, test, predictions):
    return RowResult(row=row, seed=seed, train=_report(train), test=_report(test),
                     predictions=predictions, labels=[0, 0, 1, 1], config_hash="x")


class TestGrid:

    def test_rows_in_table_order(self):
        rows = grid_rows(["ONLY", "ALL", "ALL+"], ["joint", "frozen"], include_only_attention=True)
        assert rows[:3] == [("ONLY", "joint"), ("ONLY", "frozen"), ("ONLY+", "joint")]
        assert len(rows) == 8

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            grid_rows(["ONLY", "SOME"], ["joint"])

    def test_default_grid_has_single_stain_controls(self):
        rows = grid_rows(GridConfig().variants, ["joint", "frozen"])
        assert ("ONLY-aug", "joint") in rows and ("ONLY-conv7", "frozen") in rows

    def test_row_configs_apply_variant_overrides(self):
        run = RunConfig()
        cfg, model_cfg = row_configs(run, VARIANTS["ONLY-aug"], "joint", seed=3)
        assert cfg.stage2.augment is False and cfg.seed == 3 and cfg.target_stains == []
        assert model_cfg.stem == "two_path"

        cfg, model_cfg = row_configs(run, VARIANTS["ONLY-conv7"], "frozen", seed=0)
        assert cfg.stage2.augment is True and not cfg.joint
        assert model_cfg.stem == "conv7"
        assert run.model.stem == "two_path"

        cfg, _ = row_configs(run, VARIANTS["ALL+"], "joint", seed=0)
        assert cfg.target_stains == [1, 2, 3] and cfg.attention_enabled

    def test_table_lists_every_row(self):
        grid = AblationGrid(seeds=[0], results=[
            _result("ONLY/joint", 0, 1.0, 0.8, [0, 0, 1, 0]),
            _result("ONLY-aug/joint", 0, 1.0, 0.7, [0, 1, 1, 0]),
            _result("ONLY-conv7/frozen", 0, 1.0, 0.75, [0, 0, 1, 0]),
        ])
        grid.summary = summarize(grid)
        lines = render_table(grid).splitlines()
        assert [line.split()[0] for line in lines[2:5]] == ["ONLY/joint", "ONLY-aug/joint", "ONLY-conv7/frozen"]

    def test_summary_and_table(self):
        grid = AblationGrid(seeds=[0, 1], results=[
            _result("ONLY/joint", 0, 1.0, 0.8, [0, 0, 1, 0]),
            _result("ONLY/joint", 1, 1.0, 0.6, [0, 1, 1, 0]),
            _result("ALL/joint", 0, 0.9, 0.85, [0, 0, 1, 1]),
            _result("ALL/joint", 1, 0.9, 0.85, [0, 0, 1, 1]),
        ])
        grid.summary = summarize(grid)
        only = grid.summary[0]
        assert only.row == "ONLY/joint"
        assert only.test_mean == pytest.approx(0.7)
        assert only.test_std == pytest.approx(np.std([0.8, 0.6], ddof=1))
        assert only.gap_mean == pytest.approx(30.0)

        grid.significance = pairwise_significance(grid, "ALL/joint", "ONLY/joint")
        assert set(grid.significance) == {"ALL/joint vs ONLY/joint seed 0", "ALL/joint vs ONLY/joint seed 1"}
        table = render_table(grid)
        assert "ONLY/joint" in table and "ALL/joint" in table
        assert "p = " in table


def test_epoch_log_errors_name_the_line(tmp_path):
    log = tmp_path / "metrics.jsonl"
    good = EpochRecord(epoch=0, lr=0.01, loss=1.0, generators_trainable=False).model_dump_json()
    log.write_text(good + "\n" + '{"epoch": 1}\n')
    with pytest.raises(EvaluationError, match="line 2"):
        read_epoch_log(str(log))
    with pytest.raises(EvaluationError):
        read_epoch_log(str(tmp_path / "absent.jsonl"))


# =============================================================================
# End to end
# =============================================================================

@pytest.mark.slow
def test_ablation_end_to_end(tiny_corpus, tiny_run_config, tmp_path):
    root, _ = tiny_corpus
    out_dir = str(tmp_path / "ablation")
    cache.reset_cache_stats()

    grid = run_ablation(tiny_run_config, root, out_dir=out_dir)
    assert grid.rows() == ["ONLY/joint", "ALL/joint"]
    assert set(grid.pretrain_psnr) == {"stain1", "stain2", "stain3"}
    for name in ("summary.txt", "summary.json", "resolved_config.json"):
        assert os.path.exists(os.path.join(out_dir, name))
    assert os.path.exists(os.path.join(out_dir, "ALL_joint", "seed0", "model.g2c"))

    again = run_ablation(tiny_run_config, root, out_dir=out_dir)
    assert render_table(again) == render_table(grid)
    assert cache.get_cache_stats()["hits"] == 2

    paths = write_report(out_dir)
    assert os.path.exists(paths["table"])
