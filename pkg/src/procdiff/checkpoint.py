"""Portable checkpoint bundles: an 8-byte header length, a JSON header, then raw <f8 arrays."""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .core import DTYPE, IntegrityError, StepPhrase
from .corpus import PhraseTable
from .encoders import ClassifierHead
from .training import ModelBundle, ModelConfig, new_bundle

FORMAT = "procdiff-checkpoint"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_HEADS = ("probe_head", "forecast_head", "activity_head")


def _canonical(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def config_hash(model_config: ModelConfig, extra: dict | None = None) -> str:
    doc = {"model": vars(model_config), **({"extra": extra} if extra else {})}
    return hashlib.sha256(_canonical(doc)).hexdigest()


def _split_optimizer(opt: dict | None) -> tuple[dict | None, list[tuple[str, np.ndarray]]]:
    """Move tensor state into the payload; scalar tensors (Adam's step) stay in the header."""
    if opt is None:
        return None, []
    state = opt["state"]
    arrays, meta = [], {}
    for idx in sorted(state["state"]):
        entry = {}
        for key in sorted(state["state"][idx]):
            value = state["state"][idx][key]
            if torch.is_tensor(value) and value.dim() > 0:
                if value.dtype != DTYPE:
                    raise IntegrityError(f"optimizer state {key} has dtype {value.dtype}")
                arrays.append((f"optimizer.{idx}.{key}", value.detach().numpy()))
                entry[key] = {"payload": True}
            elif torch.is_tensor(value):
                entry[key] = {"scalar": value.item(), "dtype": str(value.dtype).split(".")[-1]}
            else:
                entry[key] = {"value": value}
        meta[str(idx)] = entry
    return {"kind": opt["kind"], "param_groups": state["param_groups"], "state": meta}, arrays


def _join_optimizer(meta: dict | None, arrays: dict[str, np.ndarray]) -> dict | None:
    if meta is None:
        return None
    state = {}
    for idx, entry in meta["state"].items():
        restored = {}
        for key, spec in entry.items():
            if spec.get("payload"):
                restored[key] = torch.as_tensor(arrays[f"optimizer.{idx}.{key}"].copy())
            elif "scalar" in spec:
                restored[key] = torch.tensor(spec["scalar"], dtype=getattr(torch, spec["dtype"]))
            else:
                restored[key] = spec["value"]
        state[int(idx)] = restored
    return {"kind": meta["kind"], "state": {"state": state, "param_groups": meta["param_groups"]}}


def to_bytes(bundle: ModelBundle, cfg_hash: str | None = None, meta: dict | None = None) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = [("table.embeddings", bundle.table.embeddings),
                                            ("table.lift", bundle.table.lift)]
    for comp, module in bundle.components().items():
        for name, tensor in module.state_dict().items():
            arrays.append((f"{comp}.{name}", tensor.detach().numpy()))
    opt_meta, opt_arrays = _split_optimizer(bundle.optimizer_state)
    arrays += opt_arrays

    tensors, chunks, offset = [], [], 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "config_hash": cfg_hash or config_hash(bundle.model_config),
        "model_config": vars(bundle.model_config),
        "schedule": bundle.schedule.to_dict(),
        "variant": bundle.variant,
        "forecast_variant": bundle.forecast_variant,
        "activity_tasks": bundle.activity_tasks,
        "phrases": bundle.table.texts(),
        "table_digest": bundle.table.digest(),
        "step_count": bundle.step_count,
        "provenance": bundle.provenance,
        "optimizer": opt_meta,
        "tensors": tensors,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    head = _canonical(header)
    return _LEN.pack(len(head)) + head + payload


def read_header(data: bytes) -> tuple[dict, bytes]:
    if len(data) < _LEN.size:
        raise IntegrityError("checkpoint is truncated")
    (n,) = _LEN.unpack_from(data)
    if _LEN.size + n > len(data):
        raise IntegrityError("checkpoint header length exceeds file size")
    try:
        header = json.loads(data[_LEN.size:_LEN.size + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable checkpoint header: {exc}") from None
    if header.get("format") != FORMAT or "format_version" not in header:
        raise IntegrityError("not a procdiff checkpoint")
    if header["format_version"] != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {header['format_version']}")
    payload = data[_LEN.size + n:]
    declared = sum(t["nbytes"] for t in header["tensors"])
    if declared != len(payload):
        raise IntegrityError(f"payload is {len(payload)} bytes, header declares {declared}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError("payload checksum mismatch")
    return header, payload


def _arrays(header: dict, payload: bytes) -> dict[str, np.ndarray]:
    out, expected = {}, 0
    for t in header["tensors"]:
        if t["offset"] != expected or t["dtype"] != "<f8":
            raise IntegrityError(f"tensor {t['name']} has an inconsistent layout")
        count = int(np.prod(t["shape"], dtype=np.int64))
        if count * 8 != t["nbytes"]:
            raise IntegrityError(f"tensor {t['name']} byte length does not match its shape")
        out[t["name"]] = np.frombuffer(payload, "<f8", count, t["offset"]).reshape(t["shape"])
        expected += t["nbytes"]
    return out


def from_bytes(data: bytes) -> tuple[ModelBundle, dict]:
    header, payload = read_header(data)
    arrays = _arrays(header, payload)
    phrases = [StepPhrase(i, text) for i, text in enumerate(header["phrases"])]
    table = PhraseTable(phrases, arrays["table.embeddings"].copy(), arrays["table.lift"].copy())
    if table.digest() != header["table_digest"]:
        raise IntegrityError("phrase table digest mismatch")
    bundle = new_bundle(table, ModelConfig(**header["model_config"]), 0, header["variant"])
    by_comp: dict[str, dict[str, torch.Tensor]] = {}
    for name, arr in arrays.items():
        comp, _, key = name.partition(".")
        if comp not in ("table", "optimizer"):
            by_comp.setdefault(comp, {})[key] = torch.as_tensor(arr.copy())
    for comp in _HEADS:
        if comp in by_comp:
            n_out, dim = by_comp[comp]["weight"].shape
            setattr(bundle, comp, ClassifierHead(dim, n_out))
    for comp, module in bundle.components().items():
        if comp not in by_comp:
            raise IntegrityError(f"checkpoint lacks parameters for {comp}")
        try:
            module.load_state_dict(by_comp.pop(comp))
        except RuntimeError as exc:
            raise IntegrityError(f"{comp} parameters do not fit: {exc}") from None
    if by_comp:
        raise IntegrityError(f"unexpected components {sorted(by_comp)}")
    for module in bundle.components().values():
        for p in module.parameters():
            p.requires_grad_(False)
    bundle.forecast_variant = header["forecast_variant"]
    bundle.activity_tasks = header["activity_tasks"]
    bundle.step_count = header["step_count"]
    bundle.provenance = header["provenance"]
    bundle.optimizer_state = _join_optimizer(header["optimizer"], arrays)
    return bundle, header


def atomic_write(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save(bundle: ModelBundle, path: Path, cfg_hash: str | None = None, meta: dict | None = None) -> str:
    """Write a checkpoint atomically and return its sha256."""
    data = to_bytes(bundle, cfg_hash, meta)
    atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def load(path: Path) -> tuple[ModelBundle, dict]:
    return from_bytes(Path(path).read_bytes())
