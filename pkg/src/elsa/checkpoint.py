"""Deterministic binary checkpoints.

Layout: 5-byte magic "ELSA1", an 8-byte little-endian manifest length, the
manifest as canonical JSON (sorted keys, no whitespace), then a raw blob of
tensor bytes. Each manifest record stores name, dtype tag, shape, blob offset
and a role. No timestamps anywhere: saving the same model twice yields
byte-identical files.
"""

import json
import struct

import numpy as np

from .compress import QParams, QuantizedWeights
from .elastic import ElasticAdapter, SupernetConfig
from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"ELSA1"
ROLES = ("frozen", "adapter", "qcodes", "qscale", "qzero", "mask")

_TAG_TO_DTYPE = {"f64": "<f8", "u8": "|u1", "u16": "<u2"}
_NP_TO_TAG = {np.dtype(np.float64): "f64", np.dtype(np.uint8): "u8",
              np.dtype(np.uint16): "u16"}


def save_checkpoint(path, tensors, meta):
    """Write (name, array, role) triples plus a JSON-serializable meta dict."""
    records = []
    blob = bytearray()
    seen = set()
    for name, arr, role in tensors:
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        if role not in ROLES:
            raise CheckpointError(f"unknown tensor role {role!r} for {name!r}")
        tag = _NP_TO_TAG.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        data = np.ascontiguousarray(arr).astype(_TAG_TO_DTYPE[tag]).tobytes()
        records.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                        "offset": len(blob), "role": role})
        blob += data
    manifest = dict(meta)
    manifest["tensors"] = records
    try:
        encoded = json.dumps(manifest, sort_keys=True, separators=(",", ":"),
                             allow_nan=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"manifest is not canonical JSON: {exc}") from exc
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        fh.write(bytes(blob))


def load_checkpoint(path):
    """Read a checkpoint back as (manifest, {name: array})."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if raw[:5] != MAGIC:
        raise CheckpointError(f"bad magic in {path}: {raw[:5]!r}")
    if len(raw) < 13:
        raise CheckpointError(f"truncated header in {path}")
    (mlen,) = struct.unpack("<Q", raw[5:13])
    if 13 + mlen > len(raw):
        raise CheckpointError(f"manifest extends past end of file in {path}")
    try:
        manifest = json.loads(raw[13:13 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest in {path}: {exc}") from exc
    blob = raw[13 + mlen:]
    arrays = {}
    for rec in manifest.get("tensors", []):
        name = rec["name"]
        if name in arrays:
            raise CheckpointError(f"duplicate tensor name {name!r} in manifest")
        tag = rec["dtype"]
        if tag not in _TAG_TO_DTYPE:
            raise CheckpointError(f"unknown dtype tag {tag!r} for {name!r}")
        dt = np.dtype(_TAG_TO_DTYPE[tag])
        shape = tuple(int(s) for s in rec["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        offset = int(rec["offset"])
        if offset < 0 or offset + count * dt.itemsize > len(blob):
            raise CheckpointError(f"tensor {name!r} extends past end of blob")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(dt.newbyteorder("="))
    return manifest, arrays


def _layer_meta(model):
    meta = {}
    for layer in model.adapted_layers():
        entry = {}
        if layer.sparsity_level is not None:
            entry["sparsity_level"] = layer.sparsity_level
        if layer.qparams is not None:
            qp = layer.qparams
            entry["bits"] = qp.bits
            entry["degenerate"] = [int(v) for v in qp.degenerate]
            entry["zero_clamped"] = [int(v) for v in qp.zero_clamped]
        if layer.adapter is not None:
            ad = layer.adapter
            entry["adapter"] = {
                "alpha": ad.alpha,
                "rank_choices": list(ad.rank_choices),
                "in_choices": None if ad.in_choices is None else list(ad.in_choices),
                "out_choices": None if ad.out_choices is None else list(ad.out_choices),
            }
        if entry:
            meta[layer.layer_id] = entry
    return meta


def model_tensor_triples(model):
    triples = []
    for name, t in model.frozen_tensors().items():
        triples.append((name, t.data, "frozen"))
    for name, t in model.adapter_tensors().items():
        triples.append((name, t.data, "adapter"))
    for layer in model.adapted_layers():
        lid = layer.layer_id
        if layer.mask_arr is not None:
            triples.append((f"{lid}.mask", layer.mask_arr.astype(np.uint8), "mask"))
        if layer.qparams is not None:
            triples.append((f"{lid}.qscale", layer.qparams.scales, "qscale"))
            triples.append((f"{lid}.qzero",
                            layer.qparams.zeros.astype(np.uint16), "qzero"))
        if layer.qweights is not None:
            triples.append((f"{lid}.qcodes", layer.qweights.codes, "qcodes"))
    return triples


def save_model(path, model, extra=None):
    """Persist a model; `extra` rides along under the manifest "meta" key."""
    meta = {
        "format": 1,
        "model": model.dims.to_dict(),
        "supernet": None if model.supernet is None else model.supernet.to_dict(),
        "adapter_mode": model.adapter_mode,
        "layers": _layer_meta(model),
        "meta": extra or {},
    }
    save_checkpoint(path, model_tensor_triples(model), meta)


def _require(arrays, name, shape=None):
    arr = arrays.get(name)
    if arr is None:
        raise CheckpointError(f"checkpoint is missing tensor {name!r}")
    if shape is not None and arr.shape != tuple(shape):
        raise CheckpointError(
            f"tensor {name!r} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def load_model(path):
    from .model import ModelDims, TinyTransformer

    manifest, arrays = load_checkpoint(path)
    if manifest.get("format") != 1:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    dims = ModelDims.from_dict(manifest["model"])
    model = TinyTransformer.empty(dims)
    model.adapter_mode = manifest.get("adapter_mode", "plain")
    for name, t in model.frozen_tensors().items():
        t.data = np.array(_require(arrays, name, t.data.shape), dtype=np.float64)
    layer_meta = manifest.get("layers", {})
    for layer in model.adapted_layers():
        lid = layer.layer_id
        entry = layer_meta.get(lid, {})
        if "sparsity_level" in entry:
            layer.sparsity_level = float(entry["sparsity_level"])
        mask = arrays.get(f"{lid}.mask")
        if mask is not None:
            layer.mask_arr = mask.astype(np.float64)
        if "bits" in entry:
            n = layer.W.data.shape[1]
            scales = np.array(_require(arrays, f"{lid}.qscale", (n,)), dtype=np.float64)
            zeros = np.array(_require(arrays, f"{lid}.qzero", (n,)), dtype=np.int64)
            qp = QParams(scales=scales, zeros=zeros, bits=int(entry["bits"]),
                         degenerate=np.array(entry["degenerate"], dtype=bool),
                         zero_clamped=np.array(entry["zero_clamped"], dtype=bool))
            layer.qparams = qp
            codes = arrays.get(f"{lid}.qcodes")
            if codes is not None:
                if codes.shape != layer.W.data.shape:
                    raise CheckpointError(f"tensor {lid}.qcodes has shape "
                                          f"{codes.shape}, expected {layer.W.data.shape}")
                layer.qweights = QuantizedWeights(codes=codes, params=qp)
        spec = entry.get("adapter")
        if spec is not None:
            m, n = layer.W.data.shape
            rank_choices = tuple(int(r) for r in spec["rank_choices"])
            r_max = max(rank_choices)
            l1 = Tensor(np.array(_require(arrays, f"{lid}.L1", (m, r_max)),
                                 dtype=np.float64), requires_grad=True)
            l2 = Tensor(np.array(_require(arrays, f"{lid}.L2", (r_max, n)),
                                 dtype=np.float64), requires_grad=True)
            in_choices = spec.get("in_choices")
            out_choices = spec.get("out_choices")
            layer.adapter = ElasticAdapter(
                L1=l1, L2=l2, alpha=float(spec["alpha"]), rank_choices=rank_choices,
                in_choices=None if in_choices is None else tuple(int(c) for c in in_choices),
                out_choices=None if out_choices is None else tuple(int(c) for c in out_choices))
    sn = manifest.get("supernet")
    model.supernet = None if sn is None else SupernetConfig.from_dict(sn, dims)
    return model, manifest
