import os
import json
import logging

from models.config import OUT_DIR
from storage.files import atomic_write_text

logger = logging.getLogger("g2c-cli")


def out_root(args):
    return getattr(args, "out", None) or OUT_DIR


def out_path(args, *parts):
    return os.path.join(out_root(args), *parts)


def corpus_root(args):
    return getattr(args, "corpus", None) or out_path(args, "corpus")


def prepare_dir(path, config=None):
    """Creates a run directory and writes the fully resolved config into it"""
    os.makedirs(path, exist_ok=True)
    if config is not None:
        atomic_write_text(os.path.join(path, "resolved_config.json"), config.model_dump_json(indent=2))
    return path


def fresh_file(path):
    if os.path.exists(path):
        os.unlink(path)
    return path


def write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True))
    logger.info(f"Wrote {path}")
