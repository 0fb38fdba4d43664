"""Parameter checkpoints: a text manifest followed by a float32 payload.

Layout::

    VCKPT1 <entries>
    <name> <dim0>x<dim1>... <byte offset> <value count>
    ...
    <raw little-endian float32 payload>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

MAGIC = "VCKPT1"


class CheckpointError(ValueError):
    pass


def _state(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v for k, v in module.state_dict().items() if v.is_floating_point()}


def save_checkpoint(module: torch.nn.Module, path) -> None:
    lines, chunks, offset = [], [], 0
    state = _state(module)
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        shape = "x".join(str(n) for n in arr.shape) or "scalar"
        lines.append(f"{name} {shape} {offset} {arr.size}")
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = f"{MAGIC} {len(lines)}\n" + "".join(line + "\n" for line in lines)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        for c in chunks:
            fh.write(c)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    first = raw.find(b"\n")
    head = raw[:first].decode("utf-8").split()
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    n = int(head[1])
    pos = first + 1
    entries = []
    for _ in range(n):
        end = raw.find(b"\n", pos)
        name, shape, off, count = raw[pos:end].decode("utf-8").split()
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        entries.append((name, dims, int(off), int(count)))
        pos = end + 1
    payload = raw[pos:]
    out = {}
    for name, dims, off, count in entries:
        if off + 4 * count > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {name}")
        out[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(dims)
    return out


def load_checkpoint(module: torch.nn.Module, path) -> None:
    """Load parameters in place; names and shapes must match exactly."""
    stored = read_checkpoint(path)
    expected = _state(module)
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise CheckpointError(f"{path}: name mismatch (missing {missing}, unexpected {extra})")
    with torch.no_grad():
        for name, t in expected.items():
            arr = stored[name]
            if tuple(arr.shape) != tuple(t.shape):
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {tuple(t.shape)}")
            t.copy_(torch.from_numpy(arr.copy()))
