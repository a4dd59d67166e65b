"""
Binary checkpoints.

    magic          4 bytes  b"G2C1"
    version        u32 LE
    header_len     u32 LE
    header         JSON (utf-8): descriptor, meta, optimizer state info, tensor index
    payload        float32 LE tensors, back to back in index order
    sha256         32 bytes over everything above

Tensors are named "<part>/<param>" for parameters and "state/<buffer>" for
optimizer buffers. Loading checks magic, version, length and checksum before
any tensor is materialized; ``restore`` checks the architecture descriptor.
"""
import json
import struct
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from models.errors import (
    ArchitectureMismatchError,
    CheckpointError,
    ChecksumError,
    CorruptHeaderError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from nets.classifier import ClassifierParams, ClassifierSpec, build_classifier
from nets.generator import (
    DiscriminatorParams,
    DiscriminatorSpec,
    GeneratorParams,
    GeneratorSpec,
    build_discriminator,
    build_generator,
)
from nets.params import ParamSet
from storage.files import atomic_write_bytes

logger = logging.getLogger("g2c-storage")

MAGIC = b"G2C1"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sII")
DIGEST_SIZE = 32
PAYLOAD_DTYPE = np.dtype("<f4")

# kind -> (params class, spec class, builder)
ARCHITECTURES = {
    "generator": (GeneratorParams, GeneratorSpec, build_generator),
    "discriminator": (DiscriminatorParams, DiscriminatorSpec, build_discriminator),
    "classifier": (ClassifierParams, ClassifierSpec, build_classifier),
}


@dataclass
class Checkpoint:
    descriptor: Dict[str, dict]
    tensors: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    state: Optional[dict] = None
    version: int = FORMAT_VERSION

    def part_names(self):
        return list(self.descriptor)

    def restore(self, part, expected_kind=None, expected_spec=None) -> ParamSet:
        """
        Rebuilds one network from the checkpoint

        Args:
            part (str): Part name, e.g. "classifier" or "generator.2"
            expected_kind (str, optional): Kind the caller's slot holds
            expected_spec (dict, optional): Spec fields that must match exactly
        """
        if part not in self.descriptor:
            raise ArchitectureMismatchError(f"checkpoint has no part {part!r}; parts: {self.part_names()}")
        desc = self.descriptor[part]
        kind = desc.get("kind")
        if expected_kind is not None and kind != expected_kind:
            raise ArchitectureMismatchError(f"part {part!r} is a {kind}, expected a {expected_kind}")
        if kind not in ARCHITECTURES:
            raise ArchitectureMismatchError(f"unknown architecture kind {kind!r}")
        params_cls, spec_cls, builder = ARCHITECTURES[kind]
        try:
            spec = spec_cls.model_validate(desc["spec"])
        except (KeyError, ValueError) as error:
            raise ArchitectureMismatchError(f"bad descriptor for {part!r}: {error}") from error
        for key, value in (expected_spec or {}).items():
            if getattr(spec, key, None) != value:
                raise ArchitectureMismatchError(
                    f"{part!r} was built with {key}={getattr(spec, key, None)}, expected {value}"
                )

        template = builder(**spec.model_dump())
        prefix = f"{part}/"
        arrays = {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        if set(arrays) != set(template.arrays):
            missing = sorted(set(template.arrays) - set(arrays))
            extra = sorted(set(arrays) - set(template.arrays))
            raise ArchitectureMismatchError(f"{part!r} tensors disagree with its descriptor: missing {missing}, extra {extra}")
        for name, value in arrays.items():
            if value.shape != template.arrays[name].shape:
                raise ArchitectureMismatchError(
                    f"{part}/{name} has shape {value.shape}, architecture needs {template.arrays[name].shape}"
                )
        return params_cls(spec, {k: v.astype(np.float32) for k, v in arrays.items()})


def _parts_of(model) -> Dict[str, ParamSet]:
    if isinstance(model, ParamSet):
        return {model.kind: model}
    if hasattr(model, "parts"):
        return model.parts()
    return dict(model)


def encode_checkpoint(model, state=None, meta=None) -> bytes:
    """
    Args:
        model: A ParamSet, a mapping part -> ParamSet, or an object with parts()
        state (dict, optional): {"kind", "step", "buffers": {name: array}}
        meta (dict, optional): Training metadata (epoch, seed, config hash, ...)
    """
    parts = _parts_of(model)
    named = []
    for part, params in parts.items():
        named.extend((f"{part}/{name}", params.arrays[name]) for name in sorted(params.arrays))
    state_info = None
    if state is not None:
        buffers = state.get("buffers", {})
        named.extend((f"state/{name}", buffers[name]) for name in sorted(buffers))
        state_info = {k: v for k, v in state.items() if k != "buffers"}

    index, chunks, offset = [], [], 0
    for name, array in named:
        raw = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes()
        index.append({"name": name, "shape": list(np.shape(array)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    header = json.dumps({
        "descriptor": {part: params.descriptor() for part, params in parts.items()},
        "meta": meta or {},
        "state": state_info,
        "tensors": index,
    }, sort_keys=True).encode("utf-8")
    body = PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def _checked_entry(entry, payload_len, source):
    """(shape, offset, nbytes) of one index entry, consistent with the payload"""
    try:
        shape = [int(d) for d in entry["shape"]]
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        name = entry["name"]
    except (KeyError, TypeError, ValueError) as error:
        raise CorruptHeaderError(f"{source}: malformed tensor entry {entry!r}") from error
    if any(d < 0 for d in shape) or offset < 0 or nbytes < 0:
        raise CorruptHeaderError(f"{source}: negative extent in entry {name!r}")
    if nbytes != int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize:
        raise CorruptHeaderError(f"{source}: entry {name!r} has {nbytes} bytes for shape {shape}")
    if offset + nbytes > payload_len:
        raise CorruptHeaderError(f"{source}: entry {name!r} runs past the payload")
    return shape, offset, nbytes


def decode_checkpoint(blob: bytes, source="<bytes>") -> Checkpoint:
    if len(blob) < PREAMBLE.size:
        raise CorruptHeaderError(f"{source}: file too short for a checkpoint header")
    magic, version, header_len = PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptHeaderError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, this build reads {FORMAT_VERSION}")
    header_end = PREAMBLE.size + header_len
    if header_end > len(blob):
        raise CorruptHeaderError(f"{source}: header length {header_len} runs past end of file")
    try:
        header = json.loads(blob[PREAMBLE.size:header_end].decode("utf-8"))
        index = header["tensors"]
        payload_len = sum(int(t["nbytes"]) for t in index)
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as error:
        raise CorruptHeaderError(f"{source}: unreadable header: {error}") from error

    expected = header_end + payload_len + DIGEST_SIZE
    if len(blob) < expected:
        raise TruncatedPayloadError(f"{source}: {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise CorruptHeaderError(f"{source}: {len(blob) - expected} unexpected trailing bytes")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{source}: checksum mismatch")

    tensors, buffers = {}, {}
    for entry in index:
        shape, offset, nbytes = _checked_entry(entry, payload_len, source)
        array = np.frombuffer(blob, dtype=PAYLOAD_DTYPE, count=nbytes // PAYLOAD_DTYPE.itemsize, offset=header_end + offset)
        array = array.reshape(shape).astype(np.float32)
        if entry["name"].startswith("state/"):
            buffers[entry["name"][len("state/"):]] = array
        else:
            tensors[entry["name"]] = array

    state = None
    if header.get("state") is not None:
        state = dict(header["state"], buffers=buffers)
    return Checkpoint(
        descriptor=header.get("descriptor", {}),
        tensors=tensors,
        meta=header.get("meta", {}),
        state=state,
        version=version,
    )


def save_checkpoint(model, path, state=None, meta=None):
    blob = encode_checkpoint(model, state=state, meta=meta)
    try:
        atomic_write_bytes(path, blob)
    except OSError as error:
        raise CheckpointError(f"cannot write checkpoint {path}: {error}") from error
    logger.info(f"Checkpoint saved: {path} ({len(blob)} bytes)")
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as error:
        raise CheckpointError(f"cannot read checkpoint {path}: {error}") from error
    checkpoint = decode_checkpoint(blob, source=str(path))
    logger.debug(f"Checkpoint loaded: {path} parts={checkpoint.part_names()}")
    return checkpoint
