"""Single-file checkpoint: length-prefixed JSON header + float32 payload.

Layout: 4-byte little-endian header length, UTF-8 JSON header (format
version, config, array manifest, discovered structure), then the arrays as
little-endian float32 in manifest order. The header is human-inspectable
with `head`; the payload is compact. Loading validates the version, the
manifest, and the payload length before touching the model.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..config import RunConfig
from ..model import ArticulatedModel
from ..structure import KinematicTree

FORMAT_VERSION = 1
_MAGIC_KIND = "partfield-checkpoint"


class CheckpointError(ValueError):
    """Unreadable, truncated, or incompatible checkpoint file."""


def save_checkpoint(model: ArticulatedModel, path, iteration: int = 0) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(name, arr) for name, arr in model.store.items()]
    if model.ema_cost is not None:
        arrays.append(("ema_cost", model.ema_cost))
    header = {
        "kind": _MAGIC_KIND,
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.digest(),
        "frame_count": model.frame_count,
        "scene_radius": model.scene_radius,
        "iteration": int(iteration),
        "groups": model.groups,
        "tree": model.tree.to_dict() if model.tree is not None else None,
        "arrays": [{"name": n, "shape": list(np.shape(a))} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ArticulatedModel, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise CheckpointError(f"checkpoint {path} is truncated (no header length)")
    (hlen,) = struct.unpack("<I", raw[:4])
    if len(raw) < 4 + hlen:
        raise CheckpointError(f"checkpoint {path} is truncated (header cut short)")
    try:
        header = json.loads(raw[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} has a corrupt header: {exc}") from exc
    if header.get("kind") != _MAGIC_KIND:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version mismatch: expected {FORMAT_VERSION}, found {version}")

    manifest = header["arrays"]
    expected = sum(int(np.prod(a["shape"])) for a in manifest) * 4
    payload = raw[4 + hlen :]
    if len(payload) != expected:
        raise CheckpointError(
            f"checkpoint {path} payload is {len(payload)} bytes, manifest declares {expected}"
        )

    config = RunConfig.from_dict(header["config"])
    model = ArticulatedModel(config, header["frame_count"], header["scene_radius"])
    offset = 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += count * 4
        data = arr.astype(np.float64)
        if entry["name"] == "ema_cost":
            model.ema_cost = data
        else:
            if entry["name"] not in model.store:
                raise CheckpointError(f"checkpoint array '{entry['name']}' not part of this model")
            if model.store[entry["name"]].shape != data.shape:
                raise CheckpointError(
                    f"checkpoint array '{entry['name']}' has shape {data.shape}, "
                    f"model expects {model.store[entry['name']].shape}"
                )
            model.store[entry["name"]] = data
    model.groups = [list(g) for g in header["groups"]]
    model.tree = KinematicTree.from_dict(header["tree"]) if header["tree"] is not None else None
    return model, int(header["iteration"])
