"""Base-weight compression: activation-aware pruning and per-column
asymmetric quantization.

Everything here is a pure function of ndarrays; layers and checkpoints
decide where the results get attached.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, custom_op


def _as_array(w):
    return w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)


@dataclass(frozen=True)
class CalibrationBatch:
    """Input activations captured at one layer, flattened to tokens x features."""

    X: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise ContractError(f"calibration batch must be T x m with T >= 1, got {self.X.shape}")
        if not np.isfinite(self.X).all():
            raise ContractError("calibration batch contains non-finite values")

    @property
    def tokens(self):
        return self.X.shape[0]

    @classmethod
    def from_activations(cls, chunks):
        flat = [np.asarray(c, dtype=np.float64).reshape(-1, np.asarray(c).shape[-1]) for c in chunks]
        return cls(np.vstack(flat))


@dataclass(frozen=True)
class SparseWeights:
    """Pruned weights plus their explicit nonzero pattern."""

    Wp: np.ndarray
    pattern: frozenset
    sparsity_level: float

    @classmethod
    def from_array(cls, wp, sparsity_level):
        wp = np.asarray(wp, dtype=np.float64)
        return cls(wp, compute_pattern(wp), float(sparsity_level))

    def check(self):
        assert self.pattern == compute_pattern(self.Wp)
        m, n = self.Wp.shape
        assert len(self.pattern) <= (1.0 - self.sparsity_level) * m * n + n

    @property
    def zero_fraction(self):
        return 1.0 - len(self.pattern) / self.Wp.size


def compute_pattern(w):
    i, j = np.nonzero(_as_array(w))
    return frozenset(zip(i.tolist(), j.tolist()))


def wanda_score(w, calib):
    """Importance of each weight: |W[i,j]| times the l2 norm of input feature i."""
    wd = _as_array(w)
    x = calib.X if isinstance(calib, CalibrationBatch) else np.asarray(calib, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != wd.shape[0]:
        raise DimensionError(
            f"calibration features {x.shape} do not match weight rows {wd.shape}"
        )
    norms = np.linalg.norm(x, axis=0)
    return np.abs(wd) * norms[:, None]


def magnitude_score(w):
    return np.abs(_as_array(w))


def prune(w, scores, sparsity_level, granularity="per_output"):
    """Zero the lowest-scoring entries; ties prefer lower row index.

    per_output zeroes floor(s * m) entries within each output column;
    global zeroes floor(s * m * n) over the whole matrix.
    """
    wd = _as_array(w)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != wd.shape:
        raise DimensionError(f"scores shape {scores.shape} != weights shape {wd.shape}")
    if not 0.0 <= sparsity_level < 1.0:
        raise ConfigurationError(f"sparsity level must be in [0, 1), got {sparsity_level}")
    m, n = wd.shape
    wp = np.array(wd, copy=True)
    if granularity == "per_output":
        k = int(sparsity_level * m)
        if k:
            order = np.argsort(scores, axis=0, kind="stable")
            cols = np.broadcast_to(np.arange(n), (k, n))
            wp[order[:k, :], cols] = 0.0
    elif granularity == "global":
        k = int(sparsity_level * m * n)
        if k:
            order = np.argsort(scores, axis=None, kind="stable")
            flat = wp.reshape(-1)
            flat[order[:k]] = 0.0
    else:
        raise ConfigurationError(f"unknown pruning granularity {granularity!r}")
    return SparseWeights(wp, compute_pattern(wp), float(sparsity_level))


@dataclass(frozen=True)
class QParams:
    """Frozen per-output-column quantization grid: scales, zero points, bits."""

    scales: np.ndarray
    zeros: np.ndarray
    bits: int
    degenerate: np.ndarray
    zero_clamped: np.ndarray

    @property
    def qmax(self):
        return (1 << self.bits) - 1

    def cols(self, n):
        return QParams(self.scales[:n].copy(), self.zeros[:n].copy(), self.bits,
                       self.degenerate[:n].copy(), self.zero_clamped[:n].copy())


@dataclass(frozen=True)
class QuantizedWeights:
    """Integer codes on a QParams grid."""

    codes: np.ndarray
    params: QParams

    @property
    def bits(self):
        return self.params.bits


def calibrate(w, bits):
    """Min/max asymmetric grid per output column.

    A constant column gets scale 1 and a clamped integer zero point; it is
    flagged degenerate (dequantization is exact only for integer constants).
    """
    wd = _as_array(w)
    if wd.ndim != 2:
        raise DimensionError(f"quantization expects a 2-D weight, got {wd.shape}")
    if not 2 <= bits <= 8:
        raise ConfigurationError(f"bits must be in [2, 8], got {bits}")
    if not np.isfinite(wd).all():
        raise ContractError("cannot quantize non-finite weights")
    qmax = (1 << bits) - 1
    lo = wd.min(axis=0)
    hi = wd.max(axis=0)
    degenerate = hi == lo
    scales = np.where(degenerate, 1.0, (hi - lo) / qmax)
    z_raw = np.rint(-lo / scales)
    zeros = np.clip(z_raw, 0, qmax)
    zero_clamped = zeros != z_raw
    return QParams(scales, zeros.astype(np.int64), int(bits),
                   degenerate, zero_clamped)


def encode(w, qp):
    """clamp(round(W / s) + z, 0, 2^bits - 1) per column, as u8 codes."""
    wd = _as_array(w)
    if wd.shape[1] != qp.scales.shape[0]:
        raise DimensionError(f"weight columns {wd.shape[1]} != qparams groups {qp.scales.shape[0]}")
    raw = np.rint(wd / qp.scales) + qp.zeros
    return np.clip(raw, 0, qp.qmax).astype(np.uint8)


def quantize(w, bits):
    qp = calibrate(w, bits)
    return QuantizedWeights(encode(w, qp), qp)


def dequantize(qw):
    """s * (q - z) per column, back to float64."""
    if isinstance(qw, QuantizedWeights):
        codes, qp = qw.codes, qw.params
    else:
        raise ContractError("dequantize expects QuantizedWeights")
    return qp.scales * (codes.astype(np.float64) - qp.zeros)


def dequant_codes(codes, qp):
    return qp.scales * (codes.astype(np.float64) - qp.zeros)


def fake_quant(t, qp):
    """Quantize-dequantize a Tensor on a frozen grid, differentiably.

    Forward is dequant(encode(t)); backward is straight-through: identity
    where the pre-clamp code lands inside [0, 2^bits - 1], zero where the
    clamp saturates.
    """
    if not isinstance(t, Tensor):
        raise ContractError("fake_quant expects a Tensor")
    if t.data.shape[1] != qp.scales.shape[0]:
        raise DimensionError(f"tensor columns {t.data.shape[1]} != qparams groups {qp.scales.shape[0]}")
    raw = np.rint(t.data / qp.scales) + qp.zeros
    clipped = np.clip(raw, 0, qp.qmax)
    out = qp.scales * (clipped - qp.zeros)
    in_range = ((raw >= 0) & (raw <= qp.qmax)).astype(np.float64)
    return custom_op(out, (t,), lambda g: (g * in_range,))
