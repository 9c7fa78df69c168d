"""Flat named-tensor archive used for checkpoints and pretrained trunk weights.

Layout::

    b"WRIMNET-CKPT-1\\n"
    uint64 little-endian length of the JSON header
    JSON header: {"config": ..., "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    raw little-endian tensor bytes, concatenated in header order

The header is written with sorted keys and tensors are stored in sorted name
order, so saving the same state twice gives identical bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np
import torch

__all__ = ["MAGIC", "save_archive", "load_archive", "save_checkpoint", "load_checkpoint",
           "load_pretrained_trunk"]

MAGIC = b"WRIMNET-CKPT-1\n"
_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
}
_NAMES = {v: k for k, v in _DTYPES.items()}


def save_archive(path, tensors: dict, config=None):
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _NAMES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        data = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": _NAMES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return path


def load_archive(path):
    """Returns ``(tensors, config)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a WRIMNET-CKPT-1 archive")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    base = pos + hlen
    tensors = {}
    for e in header["tensors"]:
        dtype = _DTYPES[e["dtype"]]
        np_dtype = np.dtype(e["dtype"]).newbyteorder("<")
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np_dtype).astype(np_dtype.newbyteorder("="))
        tensors[e["name"]] = torch.from_numpy(arr.copy()).reshape(e["shape"]).to(dtype)
    return tensors, header["config"]


def save_checkpoint(path, model, extra=None):
    config = {"network": model.cfg.to_dict()}
    if extra:
        config.update(extra)
    return save_archive(path, model.state_dict(), config)


def load_checkpoint(path, map_dtype=None):
    """Rebuild the model stored in ``path``; returns ``(model, config_dict)``."""
    from .backbone import NetworkConfig, WRIMNet

    tensors, config = load_archive(path)
    if not config or "network" not in config:
        raise ValueError(f"{path}: archive carries no network config")
    net_cfg = NetworkConfig.from_dict({**config["network"], "pretrained_weights_path": None})
    model = WRIMNet(net_cfg)
    if map_dtype is not None:
        model.to(map_dtype)
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise ValueError(f"{path}: checkpoint incompatible with its config: {exc}") from None
    return model, config


def load_pretrained_trunk(model, path):
    """Copy ``stem.*`` / ``blocks.*`` tensors from an archive into ``model``.

    Every trunk tensor of the model must be present with a matching shape.
    """
    tensors, _ = load_archive(path)
    state = model.state_dict()
    trunk = {k: v for k, v in state.items() if k.startswith(("stem.", "blocks."))}
    missing = sorted(set(trunk) - set(tensors))
    if missing:
        raise ValueError(f"{path}: missing trunk tensors, e.g. {missing[:3]}")
    for k, v in trunk.items():
        if tuple(tensors[k].shape) != tuple(v.shape):
            raise ValueError(f"{path}: shape mismatch for {k}: {tuple(tensors[k].shape)} vs {tuple(v.shape)}")
        state[k] = tensors[k].to(v.dtype)
    model.load_state_dict(state)
    return model
