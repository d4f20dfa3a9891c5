"""Self-describing binary checkpoints.

Layout: magic ``PFFC``, little-endian u32 version, u32 header length, a UTF-8
JSON header, then the payload.  The header carries the network config, the
optimizer step and seed, an optional training config, and one entry per tensor
(name, group, shape, dtype, byte offset).  Tensors are stored as little-endian
float32, so float32 networks round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, TruncatedDataError
from .optim import TrainState
from .predictor import NetConfig, Network

MAGIC = b"PFFC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def save_checkpoint(net: Network, state: TrainState | None, path, extra: dict | None = None) -> None:
    """Write ``net`` and optional optimizer ``state``; the file is replaced atomically."""
    groups = [("param", net.parameters()), ("buffer", net.buffers())]
    if state is not None and state.m:
        groups += [("adam_m", state.m), ("adam_v", state.v)]
    entries = []
    chunks = []
    offset = 0
    for group, tensors in groups:
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "group": group, "shape": list(arr.shape), "dtype": "<f4", "offset": offset})
            chunks.append(data)
            offset += len(data)
    header = {
        "net_config": net.config.to_dict(),
        "step": state.step if state is not None else 0,
        "seed": state.seed if state is not None else 0,
        "extra": extra or {},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def read_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise TruncatedDataError(f"{path}: checkpoint shorter than its prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    end = _PREFIX.size + hlen
    if len(raw) < end:
        raise TruncatedDataError(f"{path}: header truncated")
    try:
        header = json.loads(raw[_PREFIX.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    return header, raw[end:]


def load_checkpoint(path) -> tuple[Network, TrainState]:
    """Rebuild the network and optimizer state stored at ``path``.

    Raises ``CheckpointError`` when a tensor is missing, duplicated, or its
    shape disagrees with the stored network config.
    """
    header, payload = read_header(path)
    try:
        cfg = NetConfig.from_dict(header["net_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid network config: {exc}") from exc
    net = Network(cfg)
    expected = {"param": net.parameters(), "buffer": net.buffers()}
    params = expected["param"]
    state = TrainState(step=int(header.get("step", 0)), seed=int(header.get("seed", 0)))
    moments = {"adam_m": state.m, "adam_v": state.v}
    seen = set()
    for e in header.get("tensors", []):
        key = (e["group"], e["name"])
        if key in seen:
            raise CheckpointError(f"{path}: tensor {e['name']} ({e['group']}) listed twice")
        seen.add(key)
        if e.get("dtype") != "<f4":
            raise CheckpointError(f"{path}: unsupported dtype {e.get('dtype')!r} for {e['name']}")
        shape = tuple(e["shape"])
        if e["group"] in expected:
            ref = expected[e["group"]].get(e["name"])
        elif e["group"] in moments:
            ref = params.get(e["name"])
        else:
            raise CheckpointError(f"{path}: unknown tensor group {e['group']!r}")
        if ref is None:
            raise CheckpointError(f"{path}: unexpected tensor {e['name']}")
        if shape != ref.shape:
            raise CheckpointError(f"{path}: {e['name']} has shape {shape}, config implies {ref.shape}")
        n = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        if start < 0 or start + 4 * n > len(payload):
            raise TruncatedDataError(f"{path}: payload too short for {e['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=start).reshape(shape)
        if e["group"] in expected:
            np.copyto(ref, arr.astype(ref.dtype))
        else:
            moments[e["group"]][e["name"]] = arr.astype(ref.dtype)
    for group in ("param", "buffer"):
        missing = [n for n in expected[group] if (group, n) not in seen]
        if missing:
            raise CheckpointError(f"{path}: missing {group} tensors {missing[:3]}")
    if state.m and (set(state.m) != set(params) or set(state.v) != set(params)):
        raise CheckpointError(f"{path}: optimizer moments do not cover every parameter")
    net.eval()
    return net, state
