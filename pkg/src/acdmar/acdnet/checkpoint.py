"""Binary checkpoint container.

Layout::

    magic (8 bytes) | version (uint32 LE) | manifest length (uint64 LE)
    manifest (UTF-8 JSON) | tensor payloads (float64 LE, row-major)

The manifest lists every tensor as ``{name, shape, dtype, offset}`` with
offsets relative to the start of the payload block, plus a free-form
``meta`` object.  A ``key=value`` text sidecar is written next to the file.
"""
import json
import struct
from collections import OrderedDict

import numpy as np

from .model import NetConfig, NetworkParams

MAGIC = b"ACDNCKPT"
VERSION = 1
DTYPE = "<f8"


class CheckpointError(ValueError):
    pass


def write_container(path, tensors, meta):
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=DTYPE)
        entries.append({"name": name, "shape": list(a.shape), "dtype": DTYPE, "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def read_container(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    manifest = json.loads(raw[start:start + mlen].decode())
    base = start + mlen
    tensors = OrderedDict()
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(raw, dtype=e["dtype"], count=n, offset=base + e["offset"])
        tensors[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return tensors, manifest["meta"]


def _sidecar(path, meta):
    lines = []
    for key, val in sorted(_flatten(meta).items()):
        lines.append(f"{key}={val}")
    with open(str(path) + ".txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            out[key] = ",".join(str(x) for x in v)
        else:
            out[key] = v
    return out


def save(path, net, optimizer=None, extra=None):
    """Write parameters, BN statistics and (optionally) Adam moments."""
    tensors = OrderedDict()
    for name, v in net.params.items():
        tensors[f"param/{name}"] = v
    recorded = {}
    for bn, st in net.buffers.items():
        tensors[f"bn/{bn}/mean"] = st["mean"]
        tensors[f"bn/{bn}/var"] = st["var"]
        recorded[bn] = bool(st.get("recorded", False))
    meta = {"config": net.config.to_dict(), "bn_recorded": recorded,
            "param_count": net.param_count()}
    if optimizer is not None:
        for name in net.params:
            tensors[f"adam/m/{name}"] = optimizer.m[name]
            tensors[f"adam/v/{name}"] = optimizer.v[name]
        meta["adam"] = optimizer.state_meta()
    if extra:
        meta["train"] = extra
    write_container(path, tensors, meta)
    _sidecar(path, {k: v for k, v in meta.items() if k != "bn_recorded"})


def load(path):
    """Return ``(net, adam_state, train_meta)``; ``adam_state`` may be None."""
    tensors, meta = read_container(path)
    cfg = NetConfig(**meta["config"])
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    buffers = {}
    for bn, rec in meta.get("bn_recorded", {}).items():
        buffers[bn] = {"mean": tensors[f"bn/{bn}/mean"], "var": tensors[f"bn/{bn}/var"],
                       "recorded": rec}
    net = NetworkParams(cfg, params, buffers)
    adam = None
    if "adam" in meta:
        adam = dict(meta["adam"])
        adam["m"] = {n: tensors[f"adam/m/{n}"] for n in params}
        adam["v"] = {n: tensors[f"adam/v/{n}"] for n in params}
    return net, adam, meta.get("train")
