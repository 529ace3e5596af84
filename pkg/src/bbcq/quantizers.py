"""Quantizer zoo: asymmetric uniform plus three post-softmax schemes.

All quantizers are fake-quant (quantize -> dequantize in float64) with the
integer codes exposed. Rounding is half-away-from-zero everywhere. The
max-anchored schemes (``mpq``, ``log2``, ``twin``) keep the calibrated
maximum exactly representable: their kernels work on the normalized ratio
``s / calibrated_max`` so the top of the range survives the float round trip
bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (ContractError, DegenerateScaleError, DimensionError,
                     ParameterError)
from .tensor import Tensor

EPSILON = 1e-12

SCHEMES = ("uniform", "mpq", "log2", "twin")


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    """One quantizer's configuration.

    ``scale``/``zero_point`` fully describe the uniform scheme; the
    max-anchored schemes additionally carry ``calibrated_max`` (and ``twin``
    its split ``threshold``), which their dequant grids are defined by.
    ``scale`` is still populated for those schemes (the equivalent step size)
    so reports stay uniform.
    """

    bits: int
    scale: float
    zero_point: int
    scheme: str
    calibrated_max: float | None = None
    threshold: float | None = None

    def __post_init__(self):
        if not isinstance(self.bits, int) or not 2 <= self.bits <= 8:
            raise ParameterError(f"bits must be an integer in [2, 8], got {self.bits}")
        if self.scheme not in SCHEMES:
            raise ParameterError(
                f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not math.isfinite(self.scale) or self.scale <= 0.0:
            raise DegenerateScaleError(
                f"scale must be finite and positive, got {self.scale}")
        levels = (1 << self.bits) - 1
        if not isinstance(self.zero_point, int) or not 0 <= self.zero_point <= levels:
            raise ParameterError(
                f"zero_point must be an integer in [0, {levels}], got {self.zero_point}")
        if self.scheme in ("mpq", "log2", "twin"):
            if self.calibrated_max is None or self.calibrated_max <= EPSILON:
                raise DegenerateScaleError(
                    f"{self.scheme} needs calibrated_max > {EPSILON}, "
                    f"got {self.calibrated_max}")
        if self.scheme == "twin":
            if (self.threshold is None or not
                    0.0 < self.threshold < self.calibrated_max):
                raise ParameterError(
                    f"twin threshold must satisfy 0 < T < calibrated_max, "
                    f"got T={self.threshold}, max={self.calibrated_max}")

    @property
    def num_codes(self) -> int:
        return 1 << self.bits


@dataclass
class CodeTensor:
    """Integer codes plus the params that produced them.

    ``codes`` is flat (row-major) and unsigned; ``shape`` restores the layout.
    """

    shape: tuple[int, ...]
    codes: np.ndarray
    params: QuantParams

    def __post_init__(self):
        self.shape = tuple(self.shape)
        self.codes = np.asarray(self.codes, dtype=np.uint8).ravel()
        expected = int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1
        if self.codes.size != expected:
            raise DimensionError(
                f"codes length {self.codes.size} does not match shape {self.shape}")
        if self.codes.size and int(self.codes.max()) >= self.params.num_codes:
            raise ContractError(
                f"code {int(self.codes.max())} out of range for {self.params.bits} bits")

    @property
    def size(self) -> int:
        return self.codes.size


def _input_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# kernels (array in / array out, broadcast-friendly so the dynamic softmax
# path can pass per-row maxima)


def affine_code_values(x: np.ndarray, scale, zero_point, bits: int) -> np.ndarray:
    top = (1 << bits) - 1
    return np.clip(round_half_away(x / scale) + zero_point, 0, top)


def affine_dequant_values(codes: np.ndarray, scale, zero_point) -> np.ndarray:
    return (np.asarray(codes, dtype=np.float64) - zero_point) * scale


def mpq_code_values(s: np.ndarray, bits: int, calibrated_max) -> np.ndarray:
    levels = (1 << bits) - 1
    return np.clip(round_half_away((s / calibrated_max) * levels), 0, levels)


def mpq_dequant_values(codes: np.ndarray, bits: int, calibrated_max) -> np.ndarray:
    levels = (1 << bits) - 1
    return (np.asarray(codes, dtype=np.float64) / levels) * calibrated_max


def log_code_values(s: np.ndarray, bits: int, calibrated_max) -> np.ndarray:
    top = (1 << bits) - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = -np.log2(s / calibrated_max)
    codes = np.clip(round_half_away(exact), 0, top)
    return np.where(s <= 0.0, float(top), codes)


def log_dequant_values(codes: np.ndarray, calibrated_max) -> np.ndarray:
    return calibrated_max * np.exp2(-np.asarray(codes, dtype=np.float64))


def twin_code_values(s: np.ndarray, bits: int, calibrated_max, threshold) -> np.ndarray:
    half = 1 << (bits - 1)
    span = half - 1
    delta1 = threshold / span
    delta2 = (calibrated_max - threshold) / span
    low = np.clip(round_half_away(s / delta1), 0, span)
    high = half + np.clip(round_half_away((s - threshold) / delta2), 0, span)
    return np.where(s < threshold, low, high)


def twin_dequant_values(codes: np.ndarray, bits: int, calibrated_max,
                        threshold) -> np.ndarray:
    half = 1 << (bits - 1)
    span = half - 1
    codes = np.asarray(codes, dtype=np.float64)
    frac_low = codes / span
    frac_high = (codes - half) / span
    low = frac_low * threshold
    high = threshold * (1.0 - frac_high) + calibrated_max * frac_high
    return np.where(codes < half, low, high)


# ---------------------------------------------------------------------------
# public quantizer API


def uniform_quant(x, scale: float, zero_point: int, bits: int) -> CodeTensor:
    """code = clamp(round(x / scale) + zero_point, 0, 2^bits - 1)."""
    params = QuantParams(bits=bits, scale=float(scale), zero_point=int(zero_point),
                         scheme="uniform")
    arr = _input_array(x)
    codes = affine_code_values(arr, params.scale, params.zero_point, bits)
    return CodeTensor(arr.shape, codes, params)


def uniform_dequant(ct: CodeTensor) -> Tensor:
    values = affine_dequant_values(ct.codes, ct.params.scale, ct.params.zero_point)
    return Tensor(values.reshape(ct.shape))


def mpq_quant(s, bits: int, calibrated_max: float) -> CodeTensor:
    """Max-anchored uniform quantizer for softmax outputs (zero point 0).

    The step is calibrated_max / (2^bits - 1), so any element equal to the
    calibrated maximum maps to the top code and dequantizes exactly.
    """
    calibrated_max = float(calibrated_max)
    levels = (1 << bits) - 1
    params = QuantParams(bits=bits, scale=calibrated_max / levels, zero_point=0,
                         scheme="mpq", calibrated_max=calibrated_max)
    arr = _input_array(s)
    codes = mpq_code_values(arr, bits, calibrated_max)
    return CodeTensor(arr.shape, codes, params)


def mpq_dequant(ct: CodeTensor) -> Tensor:
    values = mpq_dequant_values(ct.codes, ct.params.bits, ct.params.calibrated_max)
    return Tensor(values.reshape(ct.shape))


def log_quant(s, bits: int, calibrated_max: float) -> CodeTensor:
    """Power-of-two quantizer: code m reconstructs calibrated_max * 2^-m.

    Non-positive inputs take the top code (the smallest representable value).
    """
    calibrated_max = float(calibrated_max)
    params = QuantParams(bits=bits, scale=calibrated_max, zero_point=0,
                         scheme="log2", calibrated_max=calibrated_max)
    arr = _input_array(s)
    codes = log_code_values(arr, bits, calibrated_max)
    return CodeTensor(arr.shape, codes, params)


def log_dequant(ct: CodeTensor) -> Tensor:
    values = log_dequant_values(ct.codes, ct.params.calibrated_max)
    return Tensor(values.reshape(ct.shape))


def default_twin_threshold(bits: int, calibrated_max: float) -> float:
    return calibrated_max / (1 << (bits - 1))


def twin_uniform_quant(s, bits: int, calibrated_max: float,
                       threshold: float | None = None) -> CodeTensor:
    """Two-scale segmental quantizer.

    Codes [0, 2^(bits-1)-1] cover [0, threshold) with step threshold/(2^(bits-1)-1);
    codes [2^(bits-1), 2^bits-1] map [threshold, calibrated_max].
    """
    calibrated_max = float(calibrated_max)
    if threshold is None:
        threshold = default_twin_threshold(bits, calibrated_max)
    threshold = float(threshold)
    span = (1 << (bits - 1)) - 1
    params = QuantParams(bits=bits, scale=(calibrated_max - threshold) / max(span, 1),
                         zero_point=0, scheme="twin",
                         calibrated_max=calibrated_max, threshold=threshold)
    arr = _input_array(s)
    codes = twin_code_values(arr, bits, calibrated_max, threshold)
    return CodeTensor(arr.shape, codes, params)


def twin_uniform_dequant(ct: CodeTensor) -> Tensor:
    values = twin_dequant_values(ct.codes, ct.params.bits,
                                 ct.params.calibrated_max, ct.params.threshold)
    return Tensor(values.reshape(ct.shape))


def quantize(x, params: QuantParams) -> CodeTensor:
    """Scheme dispatch for a prebuilt QuantParams."""
    if params.scheme == "uniform":
        return uniform_quant(x, params.scale, params.zero_point, params.bits)
    if params.scheme == "mpq":
        return mpq_quant(x, params.bits, params.calibrated_max)
    if params.scheme == "log2":
        return log_quant(x, params.bits, params.calibrated_max)
    return twin_uniform_quant(x, params.bits, params.calibrated_max,
                              params.threshold)


def dequantize(ct: CodeTensor) -> Tensor:
    if ct.params.scheme == "uniform":
        return uniform_dequant(ct)
    if ct.params.scheme == "mpq":
        return mpq_dequant(ct)
    if ct.params.scheme == "log2":
        return log_dequant(ct)
    return twin_uniform_dequant(ct)


def fake_quant_array(x: np.ndarray, params: QuantParams) -> np.ndarray:
    """Quantize-then-dequantize without materializing a CodeTensor."""
    if params.scheme == "uniform":
        codes = affine_code_values(x, params.scale, params.zero_point, params.bits)
        return affine_dequant_values(codes, params.scale, params.zero_point)
    if params.scheme == "mpq":
        codes = mpq_code_values(x, params.bits, params.calibrated_max)
        return mpq_dequant_values(codes, params.bits, params.calibrated_max)
    if params.scheme == "log2":
        codes = log_code_values(x, params.bits, params.calibrated_max)
        return log_dequant_values(codes, params.calibrated_max)
    codes = twin_code_values(x, params.bits, params.calibrated_max, params.threshold)
    return twin_dequant_values(codes, params.bits, params.calibrated_max,
                               params.threshold)


def fake_quant_softmax_dynamic(s: np.ndarray, scheme: str, bits: int) -> np.ndarray:
    """Fake-quant softmax output with per-row (last axis) live statistics.

    Softmax rows sum to 1, so the row max is at least 1/row_len and the
    scales never degenerate.
    """
    if scheme not in SCHEMES:
        raise ParameterError(f"unknown scheme {scheme!r}")
    row_max = s.max(axis=-1, keepdims=True)
    if scheme == "mpq":
        codes = mpq_code_values(s, bits, row_max)
        return mpq_dequant_values(codes, bits, row_max)
    if scheme == "log2":
        codes = log_code_values(s, bits, row_max)
        return log_dequant_values(codes, row_max)
    if scheme == "twin":
        threshold = row_max / (1 << (bits - 1))
        codes = twin_code_values(s, bits, row_max, threshold)
        return twin_dequant_values(codes, bits, row_max, threshold)
    row_min = s.min(axis=-1, keepdims=True)
    levels = (1 << bits) - 1
    scale = np.maximum((row_max - row_min) / levels, EPSILON)
    zero_point = np.clip(round_half_away(-row_min / scale), 0, levels)
    codes = affine_code_values(s, scale, zero_point, bits)
    return affine_dequant_values(codes, scale, zero_point)


def calibrate_softmax_max(outputs) -> float:
    """Largest softmax value observed across the given batch(es)."""
    if isinstance(outputs, (Tensor, np.ndarray)):
        outputs = [outputs]
    arrays = [_input_array(o) for o in outputs]
    if not arrays or all(a.size == 0 for a in arrays):
        raise ContractError("calibrate_softmax_max needs at least one value")
    observed = max(float(a.max()) for a in arrays if a.size)
    if observed <= EPSILON:
        raise DegenerateScaleError(
            f"calibrated max {observed} is below the {EPSILON} floor")
    return observed


def minmax_affine_params(values: np.ndarray, bits: int) -> QuantParams:
    """Plain min-max affine params: scale (max-min)/(2^bits - 1), floored."""
    lo = float(values.min())
    hi = float(values.max())
    levels = (1 << bits) - 1
    scale = max((hi - lo) / levels, EPSILON)
    zero_point = int(np.clip(round_half_away(-lo / scale), 0, levels))
    return QuantParams(bits=bits, scale=scale, zero_point=zero_point,
                       scheme="uniform")


def softmax_site_params(scheme: str, bits: int, calibrated_max: float,
                        observed_min: float = 0.0) -> QuantParams:
    """Params for a post-softmax site calibrated from FP-pass statistics."""
    if scheme not in SCHEMES:
        raise ParameterError(f"unknown scheme {scheme!r}")
    levels = (1 << bits) - 1
    if scheme == "uniform":
        scale = max((calibrated_max - observed_min) / levels, EPSILON)
        zero_point = int(np.clip(round_half_away(-observed_min / scale), 0, levels))
        return QuantParams(bits=bits, scale=scale, zero_point=zero_point,
                           scheme="uniform")
    if scheme == "mpq":
        return QuantParams(bits=bits, scale=calibrated_max / levels, zero_point=0,
                           scheme="mpq", calibrated_max=calibrated_max)
    if scheme == "log2":
        return QuantParams(bits=bits, scale=calibrated_max, zero_point=0,
                           scheme="log2", calibrated_max=calibrated_max)
    threshold = default_twin_threshold(bits, calibrated_max)
    span = (1 << (bits - 1)) - 1
    return QuantParams(bits=bits, scale=(calibrated_max - threshold) / max(span, 1),
                       zero_point=0, scheme="twin", calibrated_max=calibrated_max,
                       threshold=threshold)
