"""Binary checkpoints: magic, length-prefixed JSON manifest, little-endian payload.

Layout::

    b"LKLB0001" | uint64 LE manifest length | manifest JSON (utf-8) | payload

The manifest lists every tensor with its name, shape, byte offset into the
payload and byte length. Adapters are stored as ``adapters.<path>.A/B``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from leaklab.errors import FormatError
from leaklab.lora import AdaptedModel, LoraAdapter
from leaklab.model import DecoderModel, ModelConfig, param_shapes

MAGIC = b"LKLB0001"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}


def save_checkpoint(path, model: DecoderModel | AdaptedModel, stage: str = "", dtype: str = "float64", extra: dict | None = None) -> None:
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported checkpoint dtype {dtype!r}")
    np_dtype = np.dtype(_DTYPES[dtype])
    if isinstance(model, AdaptedModel):
        base, adapters = model.base, model.adapters
    else:
        base, adapters = model, {}
    tensors: list[tuple[str, np.ndarray]] = list(base.params.items())
    adapter_meta = {}
    for p, ad in adapters.items():
        tensors.append((f"adapters.{p}.A", ad.A))
        tensors.append((f"adapters.{p}.B", ad.B))
        adapter_meta[p] = {"r": ad.r, "alpha": ad.alpha, "scaling": ad.scaling}
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": base.config.to_dict(),
        "stage": stage,
        "dtype": dtype,
        "has_adapters": bool(adapters),
        "adapters": adapter_meta,
        "tensors": manifest,
        "extra": extra or {},
    }
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_manifest(path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise FormatError(f"{path}: truncated manifest")
    try:
        meta = json.loads(blob[16 : 16 + n].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from exc
    return meta, blob[16 + n :]


def load_checkpoint(path) -> tuple[DecoderModel | AdaptedModel, dict]:
    meta, payload = read_manifest(path)
    if meta.get("dtype") not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype {meta.get('dtype')!r}")
    np_dtype = np.dtype(_DTYPES[meta["dtype"]])
    try:
        config = ModelConfig(**meta["config"])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid model config ({exc})") from exc
    expected = param_shapes(config)
    arrays: dict[str, np.ndarray] = {}
    for t in meta["tensors"]:
        name, shape = t["name"], tuple(t["shape"])
        want = int(np.prod(shape)) * np_dtype.itemsize
        if want != t["nbytes"]:
            raise FormatError(f"{path}: tensor {name} shape {list(shape)} does not match {t['nbytes']} bytes")
        if name in expected and expected[name] != shape:
            raise FormatError(f"{path}: tensor {name} has shape {list(shape)}, model expects {list(expected[name])}")
        end = t["offset"] + t["nbytes"]
        if end > len(payload):
            raise FormatError(f"{path}: payload truncated inside tensor {name}")
        arr = np.frombuffer(payload, dtype=np_dtype, count=int(np.prod(shape)), offset=t["offset"])
        arrays[name] = arr.astype(np.float64).reshape(shape)
    missing = [n for n in expected if n not in arrays]
    if missing:
        raise FormatError(f"{path}: missing tensor {missing[0]}")
    model = DecoderModel(config, {n: arrays[n] for n in expected})
    if not meta.get("has_adapters"):
        return model, meta
    adapters = {}
    # the manifest keeps save order; the adapter metadata dict is key-sorted
    order = [t["name"][len("adapters."):-2] for t in meta["tensors"] if t["name"].startswith("adapters.") and t["name"].endswith(".A")]
    if sorted(order) != sorted(meta["adapters"]):
        raise FormatError(f"{path}: adapter metadata does not match the stored adapter tensors")
    for p in order:
        am = meta["adapters"][p]
        adapters[p] = LoraAdapter(p, am["r"], am["alpha"], arrays[f"adapters.{p}.A"], arrays[f"adapters.{p}.B"], am["scaling"])
    return AdaptedModel(model, adapters), meta
