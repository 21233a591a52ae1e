"""Checkpoint directories: a plain-text manifest beside little-endian float64 blobs."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .model import ModalitySpec, MvaeModel

FORMAT = "mvae-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def save_checkpoint(model: MvaeModel, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    lines = [f"{FORMAT} {VERSION}"]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = arr.tobytes()
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape} {len(blob)} {len(raw)} {_sha(raw)}")
        blob += raw
    lines.append(f"total {len(blob)} {_sha(bytes(blob))}")
    (d / "params.bin").write_bytes(bytes(blob))
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    (d / "model.json").write_text(json.dumps(model.config(), indent=2, sort_keys=True) + "\n")
    return d


def _model_from_config(cfg: dict, params: dict) -> MvaeModel:
    specs = [ModalitySpec(**{**m, "hidden_dims": tuple(m["hidden_dims"])}) for m in cfg["modalities"]]
    return MvaeModel(cfg["latent_dim"], specs, params, cfg["variant"], cfg.get("activation", "relu"))


def load_checkpoint(directory) -> MvaeModel:
    d = Path(directory)
    try:
        lines = (d / "manifest.txt").read_text().splitlines()
        blob = (d / "params.bin").read_bytes()
        cfg = json.loads((d / "model.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint: {exc.filename}") from exc
    header = lines[0].split()
    if len(header) != 2 or header[0] != FORMAT:
        raise CheckpointError("not a checkpoint manifest")
    if int(header[1]) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header[1]}")
    params = {}
    total_seen = False
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "total":
            total_seen = True
            if int(parts[1]) != len(blob) or _sha(blob) != parts[2]:
                raise ChecksumError("params.bin does not match its manifest checksum")
            continue
        name, shape, offset, nbytes, digest = parts
        offset, nbytes = int(offset), int(nbytes)
        raw = blob[offset:offset + nbytes]
        if len(raw) != nbytes or _sha(raw) != digest:
            raise ChecksumError(f"checksum mismatch for parameter {name}")
        dims = tuple(int(s) for s in shape.split("x")) if shape else ()
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if not total_seen:
        raise CheckpointError("manifest lacks the total line")
    try:
        return _model_from_config(cfg, params)
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"model.json incompatible with parameters: {exc}") from exc
