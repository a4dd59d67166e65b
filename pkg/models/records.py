from typing import List, Literal, Optional

from pydantic import BaseModel, Field, model_validator


class PatchRecord(BaseModel):
    """One patch of the corpus"""
    path: str
    stain_id: int
    label: Optional[str] = None  # None for unlabeled reference patches
    split: Literal["train", "test", "reference"]
    patient_group: int

    @model_validator(mode="after")
    def check_label(self):
        if self.split == "reference" and self.label is not None:
            raise ValueError("reference records are unlabeled")
        if self.split != "reference" and self.label is None:
            raise ValueError(f"{self.split} records need a class label")
        if self.stain_id < 0:
            raise ValueError("stain_id must be >= 0")
        return self


class Manifest(BaseModel):
    """Corpus index"""
    records: List[PatchRecord] = Field(default_factory=list)
    corpus_seed: int
    stain_version: str
    separability_balanced_accuracy: Optional[float] = None

    def select(self, split=None, stain_id=None):
        return [
            r for r in self.records
            if (split is None or r.split == split) and (stain_id is None or r.stain_id == stain_id)
        ]

    def stain_ids(self):
        return sorted({r.stain_id for r in self.records})
