import os
from dataclasses import dataclass, field
from pathlib import PurePosixPath
from typing import List

import numpy as np

from models.config import TASK_CLASSES, TASKS
from models.errors import CorpusError
from models.records import Manifest, PatchRecord
from storage.images import read_png
from storage.manifest import read_manifest
from synth.corpus import MANIFEST_NAME


@dataclass
class PatchSet:
    """Images of one split mapped onto a task's class indices"""
    images: np.ndarray  # [N,3,H,W] float32 in [0,1]
    labels: np.ndarray  # [N] int64
    class_names: List[str]
    records: List[PatchRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return PatchSet(
            images=self.images[indices],
            labels=self.labels[indices],
            class_names=self.class_names,
            records=[self.records[i] for i in indices] if self.records else [],
        )


def load_corpus(root) -> Manifest:
    return read_manifest(os.path.join(root, MANIFEST_NAME))


def load_images(records, root):
    if not records:
        return np.zeros((0, 3, 0, 0), dtype=np.float32)
    return np.stack([read_png(os.path.join(root, r.path)) for r in records])


def load_labeled(manifest: Manifest, root, split, task, stain_id=0) -> PatchSet:
    """Labeled stain records of one split, restricted to the task's classes"""
    if task not in TASKS:
        raise CorpusError(f"unknown task {task!r}; known: {sorted(TASKS)}")
    mapping, classes = TASKS[task], TASK_CLASSES[task]
    records = [r for r in manifest.select(split, stain_id) if r.label in mapping]
    if not records:
        raise CorpusError(f"no {split} records in stain {stain_id} for task {task}")
    labels = np.array([classes.index(mapping[r.label]) for r in records], dtype=np.int64)
    return PatchSet(images=load_images(records, root), labels=labels, class_names=list(classes), records=records)


def load_reference(manifest: Manifest, root, stain_id):
    records = manifest.select("reference", stain_id)
    if not records:
        raise CorpusError(f"no reference patches for stain {stain_id}")
    return load_images(records, root)


def patch_stem(record: PatchRecord):
    """'test/00012_s2.png' -> '00012'"""
    return PurePosixPath(record.path).stem.rsplit("_s", 1)[0]


def oracle_pairs(manifest: Manifest, root, stain_id):
    """Stain-0 test images and the same latents rendered in stain_id"""
    sources = {patch_stem(r): r for r in manifest.select("test", 0)}
    targets = [r for r in manifest.select("test", stain_id)]
    pairs = [(sources[patch_stem(t)], t) for t in targets if patch_stem(t) in sources]
    if not pairs:
        raise CorpusError(f"no oracle pairs for stain {stain_id}")
    return load_images([s for s, _ in pairs], root), load_images([t for _, t in pairs], root)
