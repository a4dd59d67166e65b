"""
Full-scale runs on the default corpus: generator fidelity after pretraining,
the directional comparisons of the ablation grid over five seeds, and transfer
to the speckle task. Hours on CPU; enable with G2C_RUN_SLOW=1.
"""
import numpy as np
import pytest

from evaluation.ablation import ALL_STAINS, evaluate, run_ablation
from evaluation.metrics import psnr_fidelity
from models.config import CorpusConfig, LossConfig, ModelConfig, RunConfig, Stage1Config, TrainConfig
from nets.generator import as_translator
from storage.checkpoint import load_checkpoint, save_checkpoint
from synth.corpus import generate_corpus
from synth.dataset import load_labeled, load_reference, oracle_pairs
from training.trainer import build_model, finetune_joint, pretrain_generators, transfer_finetune

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def corpus(workdir):
    cfg = CorpusConfig(out_dir=str(workdir / "corpus"), seed=0)
    return cfg.out_dir, generate_corpus(cfg)


@pytest.fixture(scope="module")
def pretrained(corpus, workdir):
    root, manifest = corpus
    references = {s: load_reference(manifest, root, s) for s in [0] + ALL_STAINS}
    generators, history = pretrain_generators(references, ModelConfig(), Stage1Config(), ALL_STAINS, seed=0)
    path = str(workdir / "generators.g2c")
    save_checkpoint({f"generator.{m}": g for m, g in generators.items()}, path)
    return generators, history, path


@pytest.fixture(scope="module")
def grid(corpus, pretrained, workdir):
    root, _ = corpus
    run = RunConfig.model_validate({
        "corpus": {"out_dir": root},
        "grid": {"seeds": SEEDS, "variants": ["ONLY", "ALL", "ALL+"], "modes": ["joint", "frozen"]},
    })
    result = run_ablation(run, root, out_dir=str(workdir / "ablation"), generators_checkpoint=pretrained[2])
    return {s.row: s for s in result.summary}


# =============================================================================
# Stage 1
# =============================================================================

class TestPretrainingFidelity:

    @pytest.mark.parametrize("stain", ALL_STAINS)
    def test_generators_match_the_analytic_stain(self, corpus, pretrained, stain):
        root, manifest = corpus
        generators, _, _ = pretrained
        assert psnr_fidelity(as_translator(generators[stain]), *oracle_pairs(manifest, root, stain)) > 18.0

    @pytest.mark.parametrize("stain", ALL_STAINS)
    def test_cycle_loss_falls(self, pretrained, stain):
        epochs = pretrained[1].for_stain(stain)
        assert epochs[-1].cycle < 0.3 * epochs[0].cycle


# =============================================================================
# Ablation grid
# =============================================================================

class TestGridDirections:

    def test_generated_stains_help(self, grid):
        only, all_, all_att = (grid[f"{v}/joint"].test_mean for v in ("ONLY", "ALL", "ALL+"))
        assert all_att >= all_ >= only
        assert all_ - only >= 0.015

    def test_joint_beats_frozen(self, grid):
        assert grid["ALL/joint"].test_mean > grid["ALL/frozen"].test_mean

    def test_attention_narrows_the_gap(self, grid):
        assert grid["ALL+/joint"].gap_mean < grid["ONLY/joint"].gap_mean


# =============================================================================
# Transfer
# =============================================================================

def test_transfer_beats_single_stain_baseline(pretrained, workdir):
    cfg = CorpusConfig(out_dir=str(workdir / "speckle"), seed=1, cue_style="speckle")
    manifest = generate_corpus(cfg)
    train = load_labeled(manifest, cfg.out_dir, "train", "gs_vs_ss")
    test = load_labeled(manifest, cfg.out_dir, "test", "gs_vs_ss")
    checkpoint = load_checkpoint(pretrained[2])

    transferred, baseline = [], []
    for seed in SEEDS:
        train_cfg = TrainConfig(seed=seed)
        model, _ = transfer_finetune(checkpoint, train, train_cfg, ModelConfig(), LossConfig())
        transferred.append(evaluate(model, test).balanced_accuracy)

        single = train_cfg.model_copy(update={"target_stains": [], "attention_enabled": False})
        model = build_model(ModelConfig(), len(train.class_names), seed, [], attention_enabled=False,
                            class_names=train.class_names)
        model, _ = finetune_joint(model, train, single, LossConfig())
        baseline.append(evaluate(model, test).balanced_accuracy)
    assert np.mean(transferred) > np.mean(baseline)
