"""Checkpoint files: a text manifest followed by raw little-endian float32 tensors.

Layout::

    chunkflow-checkpoint 1
    role <teacher|student|critic|generic>
    step <int>
    frozen <0|1>
    config_hash <hex>
    model_config <json>
    tensor <name> float32 <d0,d1,...> <offset> <nbytes>
    ...
    end
    <payload bytes>

Offsets are relative to the first payload byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ChunkflowError
from .velocity import ModelConfig, VelocityNet

MAGIC = "chunkflow-checkpoint 1"


@dataclass(frozen=True)
class CheckpointInfo:
    role: str
    step: int
    frozen: bool
    config_hash: str
    model_config: ModelConfig
    tensors: tuple[tuple[str, tuple[int, ...], int, int], ...]  # name, shape, offset, nbytes


def save_checkpoint(params: VelocityNet, path, step: int, config_hash: str) -> Path:
    path = Path(path)
    state = params.state_dict()
    lines = [
        MAGIC,
        f"role {params.role}",
        f"step {int(step)}",
        f"frozen {int(params.frozen)}",
        f"config_hash {config_hash}",
        "model_config " + json.dumps(asdict(params.config), sort_keys=True, separators=(",", ":")),
    ]
    blobs, offset = [], 0
    for name, tensor in state.items():
        data = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4").tobytes()
        shape = ",".join(str(d) for d in tensor.shape)
        lines.append(f"tensor {name} float32 {shape} {offset} {len(data)}")
        blobs.append(data)
        offset += len(data)
    lines.append("end")
    path.write_bytes(("\n".join(lines) + "\n").encode("ascii") + b"".join(blobs))
    return path


def read_header(raw: bytes) -> tuple[CheckpointInfo, int]:
    marker = b"\nend\n"
    stop = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or stop < 0:
        raise ChunkflowError("checkpoint-corrupt", "missing or unterminated manifest")
    header = raw[:stop].decode("ascii").split("\n")
    fields, tensors = {}, []
    try:
        for line in header[1:]:
            key, _, rest = line.partition(" ")
            if key == "tensor":
                name, dtype, shape, off, nbytes = rest.split(" ")
                if dtype != "float32":
                    raise ChunkflowError("checkpoint-corrupt", f"tensor {name}: unsupported dtype {dtype}")
                dims = tuple(int(d) for d in shape.split(",")) if shape else ()
                tensors.append((name, dims, int(off), int(nbytes)))
            else:
                fields[key] = rest
        info = CheckpointInfo(
            role=fields["role"],
            step=int(fields["step"]),
            frozen=fields["frozen"] == "1",
            config_hash=fields["config_hash"],
            model_config=_model_config(json.loads(fields["model_config"])),
            tensors=tuple(tensors),
        )
    except (KeyError, ValueError) as err:
        raise ChunkflowError("checkpoint-corrupt", f"bad manifest: {err}") from err
    return info, stop + len(marker)


def _model_config(d: dict) -> ModelConfig:
    d["latent_hw"] = tuple(d["latent_hw"])
    return ModelConfig(**d)


def load_checkpoint(path, expected_hash: str | None = None) -> tuple[VelocityNet, CheckpointInfo]:
    """Restore parameters exactly. ``expected_hash`` enables the strict config check."""
    raw = Path(path).read_bytes()
    info, start = read_header(raw)
    if expected_hash is not None and info.config_hash != expected_hash:
        raise ChunkflowError("checkpoint-config-mismatch",
                             f"{path}: config hash {info.config_hash[:12]} != run {expected_hash[:12]}")
    payload = raw[start:]
    model = VelocityNet(info.model_config, role=info.role)
    expected = model.state_dict()
    state, end_prev = {}, 0
    for name, shape, offset, nbytes in sorted(info.tensors, key=lambda x: x[2]):
        count = int(np.prod(shape)) if shape else 1
        if offset < end_prev or nbytes != 4 * count or offset + nbytes > len(payload):
            raise ChunkflowError("checkpoint-corrupt", f"tensor {name}: bytes [{offset}, {offset + nbytes}) "
                                                       f"invalid for a payload of {len(payload)}")
        if name not in expected or tuple(expected[name].shape) != shape:
            raise ChunkflowError("checkpoint-corrupt", f"tensor {name}: not part of the model or wrong shape")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        end_prev = offset + nbytes
    missing = set(expected) - set(state)
    if missing:
        raise ChunkflowError("checkpoint-corrupt", f"tensor {sorted(missing)[0]}: missing from manifest")
    model.load_state_dict(state)
    if info.frozen:
        model.freeze()
    return model, info
