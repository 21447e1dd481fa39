"""Single-file checkpoint: JSON header followed by little-endian parameter blobs.

Layout::

    b"FEICKPT\\n" | uint64 LE header length | UTF-8 JSON header | blob bytes ...

Each blob entry in the header records its tensor name, role group, dtype,
shape, byte offset (relative to the end of the header) and SHA-256 digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from fei import SPEC_VERSION
from fei.errors import CheckpointError
from fei.model import EncoderConfig, FeiModel

MAGIC = b"FEICKPT\n"

# state-dict prefix -> parameter group name in the header
GROUPS = {
    "encoder.": "theta",
    "projector.": "phi",
    "target_encoder.": "theta_momentum",
    "target_projector.": "phi_momentum",
    "mask_encoder.": "upsilon",
    "predictor_target.": "psi1",
    "predictor_mask.": "psi2",
}

_DTYPES = {torch.float32: "<f4", torch.int64: "<i8"}


def _group(name: str) -> str:
    for prefix, group in GROUPS.items():
        if name.startswith(prefix):
            return group
    raise CheckpointError(f"state entry {name!r} does not belong to any parameter group")


def save_checkpoint(model: FeiModel, path, extra: dict | None = None, state: dict | None = None) -> str:
    """Write ``model`` (or an explicit ``state`` dict for it) and return the file's SHA-256."""
    state = state if state is not None else model.state_dict()
    blobs, entries, offset = [], [], 0
    for name, t in state.items():
        t = t.detach().cpu()
        if t.dtype not in _DTYPES:
            if not t.is_floating_point():
                raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
            t = t.to(torch.float32)
        dt = _DTYPES[t.dtype]
        raw = np.ascontiguousarray(t.numpy()).astype(dt, copy=False).tobytes()
        entries.append({
            "name": name, "group": _group(name), "dtype": dt, "shape": list(t.shape),
            "offset": offset, "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)

    header = {
        "spec_version": SPEC_VERSION,
        "encoder": model.cfg.to_dict(),
        "d": model.cfg.d,
        "h": model.h,
        "n": model.mask_encoder.num_components,
        "use_subspace": model.use_subspace,
        "blobs": entries,
        **(extra or {}),
    }
    head = json.dumps(header, sort_keys=True).encode()
    payload = MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, state_dict)`` after verifying every blob checksum."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 8:
        raise CheckpointError(f"{path} is not an FEI checkpoint")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start:start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    body = data[start + hlen:]

    state = {}
    for entry in header["blobs"]:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: blob {entry['name']!r} is truncated")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch for blob {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=entry["dtype"])
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(f"{path}: blob {entry['name']!r} holds {arr.size} values, shape needs {expected}")
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return header, state


def load_checkpoint(path) -> tuple[FeiModel, dict]:
    """Rebuild the model described by the header and load its weights."""
    header, state = read_checkpoint(path)
    cfg = EncoderConfig(**header["encoder"])
    model = FeiModel(cfg, header["n"], use_subspace=header["use_subspace"])
    own = model.state_dict()
    if own.keys() != state.keys():
        missing, unexpected = own.keys() - state.keys(), state.keys() - own.keys()
        raise CheckpointError(f"{path}: blobs do not match the header model (missing {sorted(missing)}, unexpected {sorted(unexpected)})")
    for name, t in state.items():
        if tuple(own[name].shape) != tuple(t.shape):
            raise CheckpointError(f"{path}: blob {name!r} has shape {tuple(t.shape)}, header model needs {tuple(own[name].shape)}")
    model.load_state_dict(state)
    return model, header


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
