"""Checkpoint container ("VXPC", little-endian).

Layout:
    magic    4s  = b"VXPC"
    version  u16 = 1
    meta_len u32, metadata JSON (utf-8): stage, step, seed, config_hash,
             flags, optimizer param groups
    n_param_blobs u32, then blobs
    n_opt_blobs   u32, then blobs

Blob: name_len u16, name utf-8, ndim u8, dims u32 * ndim, float32 data.

Parameters restore bitwise; optimizer blobs are named "opt.<index>.<key>"
matching torch.optim state entries.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .errors import FormatError, InvalidArgumentError

_MAGIC = b"VXPC"
_VERSION = 1


def _write_blob(f, name: str, tensor: torch.Tensor) -> None:
    arr = tensor.detach().cpu().to(torch.float32).numpy()
    nb = name.encode("utf-8")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.astype("<f4").tobytes())


def _read_blob(r) -> tuple[str, np.ndarray]:
    (nlen,) = r.unpack("<H")
    name = r.read(nlen).decode("utf-8")
    (ndim,) = r.unpack("<B")
    dims = [r.unpack("<I")[0] for _ in range(ndim)]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(r.read(4 * count), dtype="<f4").reshape(dims)
    return name, data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def read(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError("truncated checkpoint", offset=self.off)
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def save_checkpoint(path, modules: dict[str, torch.nn.Module], metadata: dict,
                    optimizer: torch.optim.Optimizer | None = None) -> None:
    """Persist named modules (+ optional optimizer state) with metadata."""
    meta = dict(metadata)
    opt_blobs: list[tuple[str, torch.Tensor]] = []
    if optimizer is not None:
        sd = optimizer.state_dict()
        meta["optimizer_param_groups"] = sd["param_groups"]
        for idx, state in sd["state"].items():
            for key, val in state.items():
                if isinstance(val, torch.Tensor):
                    opt_blobs.append((f"opt.{idx}.{key}", val))
                else:
                    opt_blobs.append((f"opt.{idx}.{key}",
                                      torch.tensor(float(val), dtype=torch.float32)))
    param_blobs = []
    for mod_name, module in modules.items():
        for pname, p in module.named_parameters():
            param_blobs.append((f"{mod_name}.{pname}", p))

    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", _VERSION))
        mb = json.dumps(meta, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(mb)))
        f.write(mb)
        f.write(struct.pack("<I", len(param_blobs)))
        for name, p in param_blobs:
            _write_blob(f, name, p)
        f.write(struct.pack("<I", len(opt_blobs)))
        for name, t in opt_blobs:
            _write_blob(f, name, t)


def load_checkpoint(path, modules: dict[str, torch.nn.Module],
                    optimizer: torch.optim.Optimizer | None = None,
                    expected_config_hash: str | None = None,
                    override_config_mismatch: bool = False) -> dict:
    """Restore parameters bitwise into `modules`; returns metadata.

    Refuses a config-hash mismatch unless override_config_mismatch is set.
    """
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.read(4) != _MAGIC:
        raise FormatError("bad magic: not a VXPC checkpoint", offset=0)
    (version,) = r.unpack("<H")
    if version > _VERSION:
        raise FormatError(f"unsupported future checkpoint version {version}", offset=4)
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.read(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt metadata block: {e}", offset=10) from e
    if expected_config_hash is not None and meta.get("config_hash") != expected_config_hash:
        if not override_config_mismatch:
            raise InvalidArgumentError(
                f"checkpoint config hash {meta.get('config_hash')!r} does not match "
                f"{expected_config_hash!r}; pass override to load anyway")
    (n_params,) = r.unpack("<I")
    blobs = dict(_read_blob(r) for _ in range(n_params))
    params = {}
    for mod_name, module in modules.items():
        for pname, p in module.named_parameters():
            params[f"{mod_name}.{pname}"] = p
    missing = set(params) - set(blobs)
    extra = set(blobs) - set(params)
    if missing or extra:
        raise InvalidArgumentError(
            f"parameter mismatch: missing {sorted(missing)[:3]}..., "
            f"unexpected {sorted(extra)[:3]}...")
    with torch.no_grad():
        for name, arr in blobs.items():
            t = torch.from_numpy(arr.copy())
            if tuple(params[name].shape) != tuple(t.shape):
                raise InvalidArgumentError(
                    f"shape mismatch for {name}: {tuple(t.shape)} vs "
                    f"{tuple(params[name].shape)}")
            params[name].copy_(t)
    (n_opt,) = r.unpack("<I")
    opt_blobs = dict(_read_blob(r) for _ in range(n_opt))
    if optimizer is not None and n_opt:
        groups = meta.get("optimizer_param_groups")
        if groups is None:
            raise FormatError("checkpoint has optimizer blobs but no param groups")
        state: dict[int, dict] = {}
        for name, arr in opt_blobs.items():
            _, idx, key = name.split(".", 2)
            entry = state.setdefault(int(idx), {})
            t = torch.from_numpy(arr.copy())
            entry[key] = t if t.ndim else t.reshape(())
        sd = optimizer.state_dict()
        sd["state"] = state
        sd["param_groups"] = groups
        optimizer.load_state_dict(sd)
    return meta
