"""
Manifest IO.

One JSON header line prefixed with ``#`` (corpus seed, stain table version,
separability score), then one JSON record per line with the fields path, stain_id,
label ("-" for unlabeled reference patches), split and patient_group.
"""
import json
import logging

from pydantic import ValidationError

from models.errors import ManifestError
from models.records import Manifest, PatchRecord
from storage.files import atomic_write_text

logger = logging.getLogger("g2c-storage")

FORMAT_TAG = "g2c-manifest"
UNLABELED = "-"
RECORD_FIELDS = ("path", "stain_id", "label", "split", "patient_group")


def _record_line(record: PatchRecord):
    return json.dumps({
        "path": record.path,
        "stain_id": record.stain_id,
        "label": record.label if record.label is not None else UNLABELED,
        "split": record.split,
        "patient_group": record.patient_group,
    })


def write_manifest(manifest: Manifest, path):
    header = {
        "format": FORMAT_TAG,
        "corpus_seed": manifest.corpus_seed,
        "stain_version": manifest.stain_version,
        "separability_balanced_accuracy": manifest.separability_balanced_accuracy,
    }
    lines = ["# " + json.dumps(header, sort_keys=True)]
    lines.extend(_record_line(r) for r in manifest.records)
    atomic_write_text(path, "\n".join(lines) + "\n")
    logger.info(f"Manifest written: {path} ({len(manifest.records)} records)")


def _parse_header(line):
    try:
        header = json.loads(line[1:])
    except json.JSONDecodeError as error:
        raise ManifestError(f"unreadable header: {error.msg}", 1) from error
    if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
        raise ManifestError(f"header is not a {FORMAT_TAG} header", 1)
    for key in ("corpus_seed", "stain_version"):
        if key not in header:
            raise ManifestError(f"header lacks {key}", 1)
    return header


def parse_manifest(text) -> Manifest:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ManifestError("missing header line", 1)
    header = _parse_header(lines[0])

    records = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as error:
            raise ManifestError(f"not a JSON record: {error.msg}", number) from error
        if not isinstance(raw, dict) or set(raw) != set(RECORD_FIELDS):
            raise ManifestError(f"record must have exactly the fields {RECORD_FIELDS}", number)
        if raw["label"] == UNLABELED:
            raw["label"] = None
        try:
            records.append(PatchRecord.model_validate(raw))
        except ValidationError as error:
            raise ManifestError(f"invalid record: {error.errors()[0]['msg']}", number) from error

    return Manifest(
        records=records,
        corpus_seed=header["corpus_seed"],
        stain_version=header["stain_version"],
        separability_balanced_accuracy=header.get("separability_balanced_accuracy"),
    )


def read_manifest(path) -> Manifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as error:
        raise ManifestError(f"cannot read manifest {path}: {error}") from error
    return parse_manifest(text)
