"""Versioned binary checkpoint container.

Layout: ``EVLMCKPT`` magic, u32 format version, u32 header length, UTF-8 JSON
header, then each tensor as little-endian float32 in header order.  A text
manifest of tensor names and shapes is written next to the file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import VOCAB
from .errors import IncompatibleCheckpoint

MAGIC = b"EVLMCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: dict
    model_state: dict[str, torch.Tensor]
    stage: int
    head_states: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    vocab_hash: str = VOCAB.hash

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {f"model.{k}": v for k, v in self.model_state.items()}
        for ds, state in self.head_states.items():
            out.update({f"intensity_head.{ds}.{k}": v for k, v in state.items()})
        return out


def state_hash(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode("utf-8"))
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = ckpt.tensors()
    index = [{"name": n, "shape": list(t.shape)} for n, t in tensors.items()]
    header = {
        "stage": ckpt.stage,
        "vocab_hash": ckpt.vocab_hash,
        "model_config": ckpt.model_config,
        "heads": sorted(ckpt.head_states),
        "metrics": ckpt.metrics,
        "meta": ckpt.meta,
        "tensors": index,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(raw)) + raw)
        for t in tensors.values():
            fh.write(t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    manifest = [f"# stage={ckpt.stage} vocab={ckpt.vocab_hash} format=v{FORMAT_VERSION}"]
    manifest += [f"{e['name']}\t{'x'.join(map(str, e['shape'])) or 'scalar'}" for e in index]
    path.with_name(path.name + ".manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IncompatibleCheckpoint(f"cannot read checkpoint {path}: {exc}") from None
    if data[:8] != MAGIC:
        raise IncompatibleCheckpoint(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"checkpoint format v{version}, expected v{FORMAT_VERSION}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header["vocab_hash"] != VOCAB.hash:
        raise IncompatibleCheckpoint(f"vocabulary hash {header['vocab_hash']} does not match {VOCAB.hash}")
    offset = 16 + hlen
    model_state, heads = {}, {ds: {} for ds in header["heads"]}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        offset += 4 * count
        tensor = torch.from_numpy(arr.astype(np.float32))
        name = entry["name"]
        if name.startswith("model."):
            model_state[name[6:]] = tensor
        else:
            rest = name[len("intensity_head.") :]
            ds, _, pname = rest.rpartition(".")
            heads[ds][pname] = tensor
    if offset != len(data):
        raise IncompatibleCheckpoint(f"{path} has {len(data) - offset} trailing bytes")
    return Checkpoint(
        header["model_config"],
        model_state,
        header["stage"],
        heads,
        header.get("metrics", {}),
        header.get("meta", {}),
        header["vocab_hash"],
    )
