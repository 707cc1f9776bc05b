"""Single-file checkpoint format.

Layout: 8-byte magic, little-endian uint64 header length, canonical JSON
header, then the raw tensor body. Float tensors are stored row-major
little-endian float32; integer counters as int64 and flags as uint8. The
header records every tensor's name/shape/dtype/offset, the component kind,
arbitrary JSON metadata, and a sha256 content digest of the body that is
verified on load. Identical state serializes to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, DigestError, SchemaVersionError

MAGIC = b"CLMTCKPT"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8"), "|u1": np.dtype("|u1")}


def _to_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu()
        if t.dtype in (torch.float32, torch.float64, torch.float16):
            return t.to(torch.float32).numpy().astype("<f4")
        if t.dtype in (torch.int64, torch.int32, torch.int16):
            return t.to(torch.int64).numpy().astype("<i8")
        if t.dtype in (torch.uint8, torch.bool):
            return t.to(torch.uint8).numpy().astype("|u1")
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    arr = np.asarray(t)
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    if arr.dtype.kind in "iu":
        return arr.astype("<i8")
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray]
    meta: dict
    content_digest: str
    format_version: int = FORMAT_VERSION

    def tensor(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise CheckpointError(f"checkpoint has no tensor named {name}")
        return self.tensors[name]


def save_checkpoint(path: str | Path, kind: str, tensors: dict, meta: dict) -> str:
    """Write the checkpoint; returns the content digest."""
    arrays = {name: _to_array(t) for name, t in tensors.items()}
    body = bytearray()
    records = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.tobytes()
        records.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": len(body),
                "nbytes": len(raw),
            }
        )
        body.extend(raw)
    digest = hashlib.sha256(bytes(body)).hexdigest()
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": records,
        "content_digest": digest,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(hdr).to_bytes(8, "little"))
        fh.write(hdr)
        fh.write(bytes(body))
    tmp.replace(out)
    return digest


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    if raw[:8] != MAGIC:
        raise SchemaVersionError(f"{p} is not a checkpoint file")
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + hlen].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise SchemaVersionError(f"unsupported checkpoint format {header.get('format_version')}")
    body = raw[16 + hlen :]
    digest = hashlib.sha256(body).hexdigest()
    if digest != header["content_digest"]:
        raise DigestError(f"content digest mismatch in {p}")
    tensors = {}
    for rec in header["tensors"]:
        dt = _DTYPES.get(rec["dtype"])
        if dt is None:
            raise SchemaVersionError(f"unknown tensor dtype {rec['dtype']}")
        chunk = body[rec["offset"] : rec["offset"] + rec["nbytes"]]
        tensors[rec["name"]] = np.frombuffer(chunk, dtype=dt).reshape(rec["shape"]).copy()
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(f"expected a {expect_kind} checkpoint, found {header['kind']}")
    return Checkpoint(header["kind"], tensors, header["meta"], header["content_digest"])


def state_dict_tensors(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + name: value for name, value in module.state_dict().items()}


def load_state_into(module: torch.nn.Module, ckpt: Checkpoint, prefix: str = "") -> None:
    state = module.state_dict()
    new_state = {}
    for name, value in state.items():
        arr = ckpt.tensor(prefix + name)
        new_state[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(value.dtype).reshape(value.shape)
    module.load_state_dict(new_state)


def module_digest(module: torch.nn.Module) -> str:
    """Digest over all parameters and buffers, names and values."""
    h = hashlib.sha256()
    for name, value in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(_to_array(value).tobytes())
    return h.hexdigest()


def optimizer_tensors(opt: torch.optim.Optimizer, named_params: list[tuple[str, torch.Tensor]]) -> dict:
    """Flatten AdamW state into named tensors for checkpointing."""
    out = {}
    lookup = {id(p): name for name, p in named_params}
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p, {})
            name = lookup.get(id(p))
            if name is None or not state:
                continue
            out[f"opt.{name}.exp_avg"] = state["exp_avg"]
            out[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"]
            step = state["step"]
            out[f"opt.{name}.step"] = torch.tensor([int(step.item() if torch.is_tensor(step) else step)])
    return out


def load_optimizer_tensors(
    opt: torch.optim.Optimizer, ckpt: Checkpoint, named_params: list[tuple[str, torch.Tensor]]
) -> None:
    for name, p in named_params:
        key = f"opt.{name}.exp_avg"
        if key not in ckpt.tensors:
            continue
        state = opt.state.setdefault(p, {})
        state["exp_avg"] = torch.from_numpy(ckpt.tensor(key).copy()).to(p.dtype).reshape(p.shape)
        state["exp_avg_sq"] = torch.from_numpy(ckpt.tensor(f"opt.{name}.exp_avg_sq").copy()).to(p.dtype).reshape(p.shape)
        state["step"] = torch.tensor(float(ckpt.tensor(f"opt.{name}.step")[0]))
