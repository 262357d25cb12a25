"""Fold trained adapters back into base weights.

Three regimes: vanilla (dense W + s*L1L2), sparsity-preserving (the adapter
product is masked by the base pattern before adding, so zeros stay zeros),
and quantization-aware (the merged weight is re-encoded on the frozen
integer grid the layer trained against).
"""

from dataclasses import dataclass

import numpy as np

from .compress import QuantizedWeights, SparseWeights, compute_pattern, dequantize, encode
from .elastic import extract_subnet
from .errors import ContractError
from .tensor import Tensor, rng_stream

PROBE_SEED = 2027
PROBE_ROWS = 8


def merge_vanilla(layer):
    """Dense merged weight W + s * L1 @ L2 at full activation."""
    if layer.adapter is None:
        raise ContractError(f"layer {layer.layer_id} has no adapter to merge")
    return layer.W.data + layer.adapter.product().data


def build_mask(w):
    """Binary mask of the nonzero pattern of w (SparseWeights or array)."""
    wd = w.Wp if isinstance(w, SparseWeights) else np.asarray(w)
    return (wd != 0).astype(np.float64)


def merge_sparsepeft(layer):
    """Masked merge: W^p + s * (L1 @ L2) ⊙ M. Never resurrects a zero."""
    if layer.adapter is None:
        raise ContractError(f"layer {layer.layer_id} has no adapter to merge")
    if layer.mask_arr is None:
        raise ContractError(f"layer {layer.layer_id} has no sparsity mask")
    lp = layer.adapter.product().data * layer.mask_arr
    merged = layer.W.data + lp
    level = 0.0 if layer.sparsity_level is None else layer.sparsity_level
    return SparseWeights(merged, compute_pattern(merged), level)


def merge_qa(layer, bits=None):
    """Encode W^p + L^p on the layer's frozen quantization grid."""
    qp = layer.qparams
    if qp is None:
        raise ContractError(f"layer {layer.layer_id} has no quantization params")
    if bits is not None and bits != qp.bits:
        raise ContractError(
            f"layer {layer.layer_id}: requested {bits}-bit merge but grid is {qp.bits}-bit")
    eff = layer.W.data
    if layer.adapter is not None:
        prod = layer.adapter.product().data
        if layer.mask_arr is not None:
            prod = prod * layer.mask_arr
        eff = eff + prod
    return QuantizedWeights(encode(eff, qp), qp)


@dataclass(frozen=True)
class LayerMergeRow:
    layer_id: str
    mode: str
    deviation: float
    sparsity_before: float
    sparsity_after: float
    precision: str

    def to_dict(self):
        return {"layer_id": self.layer_id, "mode": self.mode,
                "deviation": self.deviation, "sparsity_before": self.sparsity_before,
                "sparsity_after": self.sparsity_after, "precision": self.precision}


@dataclass(frozen=True)
class MergeReport:
    mode: str
    rows: tuple

    @property
    def max_deviation(self):
        return max((r.deviation for r in self.rows), default=0.0)

    def to_dict(self):
        return {"mode": self.mode, "max_deviation": self.max_deviation,
                "layers": [r.to_dict() for r in self.rows]}


def _zero_fraction(arr):
    return float(np.mean(arr == 0.0))


def merge_model(model, mode="vanilla", genome=None):
    """Merge every adapter-bearing layer; returns (merged model, report).

    A non-max genome is first extracted to a standalone model, so merging
    always happens at full widths. The merged model has no adapters and
    runs the plain forward path.
    """
    if mode not in ("vanilla", "sparsepeft", "qa"):
        raise ContractError(f"unknown merge mode {mode!r}")
    work = model
    if genome is not None and model.supernet is not None:
        work = extract_subnet(model, genome)
    merged = work.clone()
    rows = []
    for idx, (src, dst) in enumerate(zip(work.adapted_layers(), merged.adapted_layers())):
        qa_layer = mode == "qa" and src.qparams is not None
        if src.adapter is None and not qa_layer:
            continue
        before = _zero_fraction(src.W.data)
        if mode == "vanilla":
            dst.W = Tensor(merge_vanilla(src))
            dst.mask_arr = None
            dst.sparsity_level = None
            precision = "f64"
        elif mode == "sparsepeft":
            sw = merge_sparsepeft(src)
            dst.W = Tensor(sw.Wp)
            precision = "f64"
        else:
            qw = merge_qa(src)
            dst.W = Tensor(dequantize(qw))
            dst.qweights = qw
            precision = f"int{qw.bits}"
        dst.adapter = None
        probe = Tensor(rng_stream(PROBE_SEED, idx).normal(0.0, 1.0, (PROBE_ROWS, src.W.data.shape[0])))
        y_before = src.forward(probe, mode=work.adapter_mode).data
        y_after = (probe.data @ dst.W.data)
        deviation = float(np.abs(y_before - y_after).max())
        rows.append(LayerMergeRow(src.layer_id, mode, deviation, before,
                                  _zero_fraction(dst.W.data), precision))
    merged.adapter_mode = "plain"
    merged.supernet = None  # weights are fixed now; no elastic space remains
    return merged, MergeReport(mode, tuple(rows))
