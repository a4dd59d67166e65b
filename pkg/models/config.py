import os
import json
from typing import Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from models.errors import ConfigError

# Load .env file
load_dotenv()

# Environment defaults
OUT_DIR = os.getenv("G2C_OUT_DIR", "runs")
LOG_LEVEL = os.getenv("G2C_LOG_LEVEL", "INFO")
CHECKED_MODE = os.getenv("G2C_CHECKED", "False").lower() in ["true", "1", "t"]
SLOW_THRESHOLD_S = float(os.getenv("G2C_SLOW_THRESHOLD_S", "600"))

CLASS_NAMES = ("noa", "gs", "ss")

# Class names per task; gs and ss merge into the abnormal "s" class at level 1
TASKS: Dict[str, Dict[str, str]] = {
    "s_vs_noa": {"noa": "noa", "gs": "s", "ss": "s"},
    "gs_vs_ss": {"gs": "gs", "ss": "ss"},
    "three_way": {"noa": "noa", "gs": "gs", "ss": "ss"},
}
TASK_CLASSES: Dict[str, List[str]] = {
    "s_vs_noa": ["noa", "s"],
    "gs_vs_ss": ["gs", "ss"],
    "three_way": ["noa", "gs", "ss"],
}


class StrictModel(BaseModel):
    """Base for config documents: unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")


class CorpusConfig(StrictModel):
    """Synthetic corpus settings"""
    out_dir: str = "corpus"
    seed: int = 0
    image_size: int = 64
    n_train: int = 965
    n_test: int = 400
    # Table-1 style imbalance noa:gs:ss, rescaled to n_train / n_test
    class_ratios: Dict[str, float] = Field(
        default_factory=lambda: {"noa": 7000.0, "gs": 2002.0, "ss": 648.0}
    )
    num_target_stains: int = 3
    reference_n: int = 100
    train_patients: int = 149
    test_patients: int = 60
    cue_style: Literal["sector", "speckle"] = "sector"
    separability_check: bool = True
    separability_attempts: int = 5

    @field_validator("class_ratios")
    @classmethod
    def check_ratios(cls, value):
        if set(value) != set(CLASS_NAMES):
            raise ValueError(f"class_ratios must name exactly {CLASS_NAMES}")
        if any(v <= 0 for v in value.values()):
            raise ValueError("class_ratios must be positive")
        return value

    @model_validator(mode="after")
    def check_sizes(self):
        if self.image_size % 4 != 0:
            raise ValueError("image_size must be divisible by 4")
        if self.reference_n < 2:
            raise ValueError("reference_n must be at least 2")
        if self.num_target_stains < 0 or self.num_target_stains > 3:
            raise ValueError("num_target_stains must be in [0, 3]")
        return self


class ModelConfig(StrictModel):
    """Architecture widths shared by every build"""
    image_size: int = 64
    generator_base: int = 8
    residual_blocks: int = 6
    discriminator_base: int = 8
    discriminator_layers: int = 4
    classifier_base: int = 8
    expansion: int = 10
    reduction: int = 4
    pool_layout: Literal["per_block", "final"] = "per_block"
    stem: Literal["two_path", "conv7"] = "two_path"


class LossConfig(StrictModel):
    """Training objectives"""
    gamma: float = 2.0
    # None means inverse class frequency, normalized to mean 1
    alpha: Optional[List[float]] = None
    lambda_cyc: float = 10.0

    @model_validator(mode="after")
    def check_values(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.alpha is not None and any(a <= 0 for a in self.alpha):
            raise ValueError("alpha entries must be > 0")
        if self.lambda_cyc < 0:
            raise ValueError("lambda_cyc must be >= 0")
        return self


class Stage1Config(StrictModel):
    """Generator pretraining (unpaired cycle-consistent translation)"""
    epochs: int = 200
    adam_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_cyc: float = 10.0
    batch_size: int = 4


class Stage2Config(StrictModel):
    """Joint fine-tuning of generators and classifier"""
    epochs: int = 30
    lr0: float = 0.01
    decay_every: int = 5
    decay_factor: float = 10.0
    momentum: float = 0.5
    freeze_generator_epochs: int = 5
    batch_size: int = 8
    accumulate_steps: int = 1
    augment: bool = True
    eval_each_epoch: bool = True


class TrainConfig(StrictModel):
    """All hyperparameters of both training stages"""
    stage1: Stage1Config = Field(default_factory=Stage1Config)
    stage2: Stage2Config = Field(default_factory=Stage2Config)
    seed: int = 0
    target_stains: List[int] = Field(default_factory=lambda: [1, 2, 3])
    attention_enabled: bool = True
    joint: bool = True
    task: Literal["s_vs_noa", "gs_vs_ss", "three_way"] = "gs_vs_ss"

    @property
    def M(self) -> int:
        return len(self.target_stains)

    @model_validator(mode="after")
    def check_schedule(self):
        s1, s2 = self.stage1, self.stage2
        if s2.freeze_generator_epochs > s2.epochs:
            raise ValueError("freeze_generator_epochs must not exceed epochs")
        rates = [s1.adam_lr, s2.lr0, s2.decay_factor]
        if any(r <= 0 for r in rates) or s2.momentum < 0:
            raise ValueError("all rates must be > 0")
        if s1.epochs < 1 or s2.epochs < 1 or s2.decay_every < 1:
            raise ValueError("epoch counts must be >= 1")
        if s1.batch_size < 1 or s2.batch_size < 1 or s2.accumulate_steps < 1:
            raise ValueError("batch sizes must be >= 1")
        if len(set(self.target_stains)) != len(self.target_stains) or any(s < 1 for s in self.target_stains):
            raise ValueError("target_stains must be distinct ids >= 1")
        return self


class GridConfig(StrictModel):
    """Ablation grid"""
    out_dir: str = "ablation"
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    variants: List[str] = Field(
        default_factory=lambda: ["ONLY", "ONLY-aug", "ONLY-conv7", "+stain1", "+stain2", "+stain3", "ALL", "ALL+"]
    )
    modes: List[Literal["joint", "frozen"]] = Field(default_factory=lambda: ["joint", "frozen"])
    include_only_attention: bool = False
    pretrained_generators: Optional[str] = None
    level1_filter: bool = False


class RunConfig(StrictModel):
    """Top-level document read from --config"""
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    grid: GridConfig = Field(default_factory=GridConfig)

    @model_validator(mode="after")
    def check_consistency(self):
        if self.model.image_size != self.corpus.image_size:
            raise ValueError("model.image_size must equal corpus.image_size")
        if any(s > self.corpus.num_target_stains for s in self.train.target_stains):
            raise ValueError("train.target_stains refers to a stain the corpus does not render")
        return self


def load_run_config(path=None, seed=None):
    """
    Reads and validates a run configuration

    Args:
        path (str, optional): JSON config file; defaults apply when omitted
        seed (int, optional): Overrides both corpus and training seeds

    Returns:
        RunConfig: Fully resolved configuration
    """
    raw = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except OSError as error:
            raise ConfigError(f"cannot read config {path}: {error}") from error
        except json.JSONDecodeError as error:
            raise ConfigError(f"config {path} is not valid JSON: {error}") from error

    try:
        config = RunConfig.model_validate(raw)
    except ValueError as error:
        raise ConfigError(f"invalid config: {error}") from error

    if seed is not None:
        config.corpus.seed = seed
        config.train.seed = seed
    return config
