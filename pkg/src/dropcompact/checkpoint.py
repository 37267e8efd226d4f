"""Versioned binary checkpoint container.

Layout: 4-byte magic, little-endian uint32 version and header length, a
canonical JSON header (sorted keys, no whitespace) describing config,
bookkeeping and the array manifest, then each array as raw little-endian
float64 bytes in manifest order. Canonical encoding makes
save -> load -> save byte-identical. A lossless hex-float text export
exists for debugging.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .network import MlpParams
from .retention import RetentionParams

MAGIC = b"DCPK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Container is malformed or has an unsupported version."""


@dataclass
class Checkpoint:
    params: MlpParams
    pi: RetentionParams
    config: dict
    seed: int
    epoch: int
    best_metrics: dict = field(default_factory=dict)
    compaction_history: list = field(default_factory=list)


def _manifest(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    arrays = []
    for i, (w, b) in enumerate(zip(ckpt.params.weights, ckpt.params.biases)):
        arrays.append((f"weight_{i}", w))
        arrays.append((f"bias_{i}", b))
    for layer, v in enumerate(ckpt.pi.layers):
        arrays.append((f"retention_{layer}", v))
    return arrays


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    arrays = _manifest(ckpt)
    header = {
        "format_version": FORMAT_VERSION,
        "layer_dims": list(ckpt.params.layer_dims),
        "hidden_activations": list(ckpt.params.hidden_activations),
        "config": ckpt.config,
        "seed": int(ckpt.seed),
        "epoch": int(ckpt.epoch),
        "best_metrics": ckpt.best_metrics,
        "compaction_history": ckpt.compaction_history,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} unsupported (expected {FORMAT_VERSION})"
            )
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise CheckpointError(f"truncated payload for array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise CheckpointError("trailing bytes after checkpoint payload")

    n_layers = len(header["layer_dims"]) - 1
    params = MlpParams(
        [arrays[f"weight_{i}"] for i in range(n_layers)],
        [arrays[f"bias_{i}"] for i in range(n_layers)],
        tuple(header["hidden_activations"]),
    )
    params.validate()
    pi = RetentionParams([arrays[f"retention_{layer}"] for layer in range(n_layers)])
    pi.validate(params)
    return Checkpoint(
        params=params,
        pi=pi,
        config=header["config"],
        seed=header["seed"],
        epoch=header["epoch"],
        best_metrics=header.get("best_metrics", {}),
        compaction_history=header.get("compaction_history", []),
    )


def export_text(ckpt: Checkpoint) -> str:
    """Lossless JSON export: every float64 rendered as a hex literal."""
    arrays = {
        name: {
            "shape": list(a.shape),
            "values": [float(v).hex() for v in np.asarray(a).ravel()],
        }
        for name, a in _manifest(ckpt)
    }
    doc = {
        "format_version": FORMAT_VERSION,
        "layer_dims": list(ckpt.params.layer_dims),
        "hidden_activations": list(ckpt.params.hidden_activations),
        "config": ckpt.config,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "best_metrics": ckpt.best_metrics,
        "compaction_history": ckpt.compaction_history,
        "arrays": arrays,
    }
    return json.dumps(doc, sort_keys=True, indent=1)
