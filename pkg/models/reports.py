from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class GradCheckReport(BaseModel):
    """Outcome of comparing analytic and finite-difference gradients"""
    name: str = "gradcheck"
    max_rel_err: float
    passed: bool
    worst_param: Optional[str] = None
    per_param: Dict[str, float] = Field(default_factory=dict)
    message: Optional[str] = None


class ParameterBreakdown(BaseModel):
    """Exact parameter counts of a classifier"""
    trunk: int
    attention_total: int
    head: int
    grand_total: int


class MetricReport(BaseModel):
    """Classification metrics over one split"""
    class_names: List[str]
    per_class_recall: Dict[str, float]
    balanced_accuracy: float
    f1: Optional[float] = None  # binary tasks only
    confusion: List[List[int]]
    n: int


class EpochRecord(BaseModel):
    """One line of metrics.jsonl for the fine-tuning stage"""
    epoch: int
    lr: float
    loss: float
    generators_trainable: bool
    train_balanced_accuracy: Optional[float] = None
    test_balanced_accuracy: Optional[float] = None
    generator_hash: Optional[str] = None
    seconds: float = 0.0


class TrainHistory(BaseModel):
    epochs: List[EpochRecord] = Field(default_factory=list)
    step_lrs: List[float] = Field(default_factory=list)


class PretrainEpoch(BaseModel):
    """One line of metrics.jsonl for generator pretraining"""
    target_stain: int
    epoch: int
    g_adv: float
    cycle: float
    d_loss: float


class PretrainHistory(BaseModel):
    epochs: List[PretrainEpoch] = Field(default_factory=list)

    def for_stain(self, stain):
        return [e for e in self.epochs if e.target_stain == stain]


class RowResult(BaseModel):
    """One ablation row evaluated for one seed"""
    row: str
    seed: int
    train: MetricReport
    test: MetricReport
    predictions: List[int]
    labels: List[int]
    record_paths: List[str] = Field(default_factory=list)
    psnr: Dict[str, float] = Field(default_factory=dict)
    config_hash: str

    @property
    def gap(self):
        return 100.0 * (self.train.balanced_accuracy - self.test.balanced_accuracy)


class RowSummary(BaseModel):
    row: str
    n_seeds: int
    test_mean: float
    test_std: float
    train_mean: float
    gap_mean: float


class AblationGrid(BaseModel):
    """All rows of the ablation, per seed"""
    seeds: List[int]
    results: List[RowResult] = Field(default_factory=list)
    summary: List[RowSummary] = Field(default_factory=list)
    significance: Dict[str, float] = Field(default_factory=dict)
    pretrain_psnr: Dict[str, float] = Field(default_factory=dict)

    def rows(self):
        seen = []
        for r in self.results:
            if r.row not in seen:
                seen.append(r.row)
        return seen

    def for_row(self, row):
        return [r for r in self.results if r.row == row]
