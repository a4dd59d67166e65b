"""
Synthetic multi-stain corpus.

Layout under the corpus root:

    manifest.jsonl
    corpus_config.json
    train/{idx:05d}_s0.png              labeled, stain 0
    test/{idx:05d}_s0.png               labeled, stain 0
    test/{idx:05d}_s{m}.png             same latent in stain m (fidelity oracle only)
    reference/stain{m}/{idx:05d}.png    unlabeled random crops, one set per stain
"""
import os
import json
import logging

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score
from sklearn.model_selection import train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from models.config import CLASS_NAMES, CorpusConfig
from models.errors import CorpusError
from models.records import Manifest, PatchRecord
from storage.files import atomic_write_text
from storage.images import to_uint8, write_png
from storage.manifest import write_manifest
from synth.stains import STAIN_TABLE_VERSION, apply_stain, render_base

logger = logging.getLogger("g2c-synth")

SPLIT_CODES = {"train": 0, "test": 1, "reference": 2}
# Balanced-accuracy window the stain-0 linear classifier must fall in (gs vs ss)
SEPARABILITY_BOUNDS = (0.5, 0.95)
SEED_STRIDE = 7919
MANIFEST_NAME = "manifest.jsonl"


def patch_seed(corpus_seed, split, stain, index):
    """Per-patch seed derived solely from (corpus seed, split, stain, index)"""
    sequence = np.random.SeedSequence([corpus_seed, SPLIT_CODES[split], stain, index])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def class_counts(n, ratios):
    """Largest-remainder apportionment of n patches over CLASS_NAMES"""
    total = sum(ratios[c] for c in CLASS_NAMES)
    exact = [n * ratios[c] / total for c in CLASS_NAMES]
    counts = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return dict(zip(CLASS_NAMES, counts))


def _split_labels(corpus_seed, split, n, ratios):
    counts = class_counts(n, ratios)
    labels = np.array([c for c in CLASS_NAMES for _ in range(counts[c])])
    rng = np.random.default_rng([corpus_seed, SPLIT_CODES[split], 0xC1A55])
    return labels[rng.permutation(n)].tolist()


def pixel_statistics(images):
    """Per-channel mean and standard deviation: [N,3,H,W] -> [N,6]"""
    images = np.asarray(images, dtype=np.float64)
    return np.concatenate([images.mean(axis=(2, 3)), images.std(axis=(2, 3))], axis=1)


def separability_score(images, labels, seed=0):
    """
    Balanced accuracy of a logistic-regression classifier on pixel statistics,
    trained on a stratified half and scored on the other half

    Returns None when either class has fewer than 4 examples.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < 4:
        return None
    features = pixel_statistics(images)
    x_fit, x_held, y_fit, y_held = train_test_split(
        features, labels, test_size=0.5, stratify=labels, random_state=seed
    )
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=1000))
    clf.fit(x_fit, y_fit)
    return float(balanced_accuracy_score(y_held, clf.predict(x_held)))


def _render_split(config, corpus_seed, split, n):
    labels = _split_labels(corpus_seed, split, n, config.class_ratios)
    latents = [
        render_base(patch_seed(corpus_seed, split, 0, idx), label, config.image_size, config.cue_style)
        for idx, label in enumerate(labels)
    ]
    return labels, latents


def _train_separability(config, corpus_seed, labels, latents):
    keep = [i for i, label in enumerate(labels) if label in ("gs", "ss")]
    images = np.stack([to_uint8(apply_stain(latents[i], 0)) for i in keep]) / 255.0 if keep else []
    return separability_score(images, [labels[i] for i in keep], seed=corpus_seed)


def _reference_latent(config, corpus_seed, stain, idx):
    """Random crop: the blob centre may fall outside the patch"""
    rng = np.random.default_rng(patch_seed(corpus_seed, "reference", stain, idx))
    ratios = np.array([config.class_ratios[c] for c in CLASS_NAMES])
    label = CLASS_NAMES[rng.choice(len(CLASS_NAMES), p=ratios / ratios.sum())]
    center = tuple(rng.uniform(-0.25, 1.25, size=2) * config.image_size)
    return render_base(int(rng.integers(2 ** 62)), label, config.image_size, config.cue_style, center=center)


def generate_corpus(config: CorpusConfig, out_dir=None) -> Manifest:
    """
    Renders the corpus and writes images, manifest and resolved config

    Args:
        config (CorpusConfig): Corpus settings
        out_dir (str, optional): Overrides config.out_dir

    Returns:
        Manifest: The written manifest
    """
    root = out_dir or config.out_dir
    if config.seed < 0:
        raise CorpusError("corpus seed must be >= 0")
    stains = list(range(config.num_target_stains + 1))

    attempts = max(1, config.separability_attempts) if config.separability_check else 1
    for attempt in range(attempts):
        corpus_seed = config.seed + attempt * SEED_STRIDE
        train_labels, train_latents = _render_split(config, corpus_seed, "train", config.n_train)
        score = None
        if config.separability_check:
            score = _train_separability(config, corpus_seed, train_labels, train_latents)
        if score is None or SEPARABILITY_BOUNDS[0] < score < SEPARABILITY_BOUNDS[1]:
            break
        logger.warning(
            f"Separability balanced accuracy {score:.3f} outside {SEPARABILITY_BOUNDS} for seed {corpus_seed} "
            f"(attempt {attempt + 1}/{attempts})"
        )
    else:
        logger.warning(f"Keeping seed {corpus_seed} despite separability {score:.3f}")
    if score is not None:
        logger.info(f"Stain-0 gs/ss separability balanced accuracy: {score:.3f}")

    records = []

    for idx, (label, latent) in enumerate(zip(train_labels, train_latents)):
        rel = f"train/{idx:05d}_s0.png"
        write_png(os.path.join(root, rel), apply_stain(latent, 0))
        records.append(PatchRecord(
            path=rel, stain_id=0, label=label, split="train",
            patient_group=idx % config.train_patients,
        ))

    test_labels, test_latents = _render_split(config, corpus_seed, "test", config.n_test)
    for idx, (label, latent) in enumerate(zip(test_labels, test_latents)):
        group = config.train_patients + idx % config.test_patients
        for stain in stains:
            rel = f"test/{idx:05d}_s{stain}.png"
            write_png(os.path.join(root, rel), apply_stain(latent, stain))
            records.append(PatchRecord(path=rel, stain_id=stain, label=label, split="test", patient_group=group))

    reference_base = config.train_patients + config.test_patients
    for stain in stains:
        for idx in range(config.reference_n):
            rel = f"reference/stain{stain}/{idx:05d}.png"
            write_png(os.path.join(root, rel), apply_stain(_reference_latent(config, corpus_seed, stain, idx), stain))
            records.append(PatchRecord(
                path=rel, stain_id=stain, label=None, split="reference",
                patient_group=reference_base + idx,
            ))

    manifest = Manifest(
        records=records,
        corpus_seed=corpus_seed,
        stain_version=STAIN_TABLE_VERSION,
        separability_balanced_accuracy=score,
    )
    try:
        write_manifest(manifest, os.path.join(root, MANIFEST_NAME))
        resolved = config.model_copy(update={"out_dir": root})
        atomic_write_text(os.path.join(root, "corpus_config.json"), json.dumps(resolved.model_dump(), indent=2, sort_keys=True))
    except OSError as error:
        raise CorpusError(f"cannot write corpus index under {root}: {error}") from error

    logger.info(
        f"Corpus written to {root}: {config.n_train} train, {config.n_test} test, "
        f"{config.reference_n} reference patches x {len(stains)} stains"
    )
    return manifest
