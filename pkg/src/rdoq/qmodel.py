"""Frozen fixed-point codec: per-layer integer payloads plus two forwards.

``simulate_*`` runs dequantized float64 arithmetic (the simulated
quantization path); ``integer_*`` runs int32 accumulation and fixed-point
requantization only.  Both share the same grids, so their outputs agree to
within one output step per layer.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fixedpoint as fp
from . import tensorad as ad
from .licnet import LOG_SCALE_MAX, LOG_SCALE_MIN, LayerSpec, LicModel, scale_index

# Log-scale maps leave h_s on a signed 1/32 grid.
LOG_SCALE_FRAC_BITS = 5
PIXEL_SCALE = fp.fix_scale(1.0 / 255.0)
LATENT_SCALE = fp.FixedScale(2 ** fp.DEFAULT_NR)
LOG_SCALE_GRID = fp.FixedScale(2 ** (fp.DEFAULT_NR - LOG_SCALE_FRAC_BITS))

BIAS_MODES = ("rescaled", "int32")


@dataclass
class Grid:
    """Target grid of a layer output: scale, zero-point, bits (None = signed)."""

    scale: fp.FixedScale
    zero: np.ndarray
    bits: Optional[int]


@dataclass
class FrozenLayer:
    """Everything a strict integer layer needs, plus the learned multipliers."""

    name: str
    x_scale: fp.FixedScale  # per input channel
    x_zero: np.ndarray
    x_bits: int
    weight: fp.QTensor  # axis 0 for conv, 1 for transposed conv
    bias: np.ndarray  # int, in units of s_w[o] * bias_ref
    bias_ref: fp.FixedScale
    bias_mode: str = "rescaled"
    bias_q: Optional[fp.QTensor] = None  # low-bit bias payload when rescaled
    n_w: np.ndarray = field(default_factory=lambda: np.ones(1))
    n_x: np.ndarray = field(default_factory=lambda: np.ones(1))
    n_b: float = 1.0

    def __post_init__(self):
        self.x_zero = np.asarray(self.x_zero, dtype=np.int64)
        self.bias = np.asarray(self.bias, dtype=np.int64)
        if self.bias_mode not in BIAS_MODES:
            raise ValueError(f"bias mode must be one of {BIAS_MODES}")
        fp._check_int32(self.bias, "bias")

    @property
    def input_grid(self) -> Grid:
        return Grid(self.x_scale, self.x_zero, self.x_bits)

    def dequant_weight(self) -> np.ndarray:
        return fp.dequantize(self.weight)

    def bias_value(self) -> np.ndarray:
        """Real value the integer bias stands for in the accumulator."""
        sw = np.broadcast_to(np.asarray(self.weight.scale.value, dtype=np.float64), self.bias.shape)
        return self.bias * sw * self.bias_ref.value

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x_scale.raw, self.x_zero, self.weight.values, self.weight.scale.raw,
                    self.weight.zero_point, self.bias, self.bias_ref.raw):
            h.update(np.asarray(arr, dtype=np.int64).tobytes())
        h.update(self.bias_mode.encode())
        return h.hexdigest()


def quantize_to_grid(x: np.ndarray, grid: Grid) -> fp.QTensor:
    zero = grid.zero if grid.zero.size > 1 else int(grid.zero.reshape(-1)[0])
    axis = 1 if (grid.scale.per_channel or np.size(grid.zero) > 1) else None
    return fp.quantize_affine(x, grid.scale, zero, grid.bits, axis=axis)


@dataclass
class QuantizedModel:
    float_model: LicModel
    layers: list  # FrozenLayer aligned with float_model.layers
    tag: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layers) != len(self.float_model.layers):
            raise ValueError("one frozen layer per model layer required")

    @property
    def specs(self) -> list[LayerSpec]:
        return self.float_model.layers

    def output_grid(self, i: int) -> Grid:
        """Grid the integer output of layer ``i`` lands on."""
        spec = self.specs[i]
        chain = self.float_model.transform_layers(spec.transform)
        if i != chain[-1]:
            return self.layers[i + 1].input_grid
        zero = np.zeros(1, dtype=np.int64)
        if spec.transform in ("g_a", "h_a"):
            return Grid(LATENT_SCALE, zero, None)
        if spec.transform == "h_s":
            return Grid(LOG_SCALE_GRID, zero, None)
        return Grid(PIXEL_SCALE, zero, 8)

    def layer_digests(self) -> list[str]:
        return [layer.digest() for layer in self.layers]

    # simulated path ----------------------------------------------------------------
    def simulate_layer(self, i: int, xq: fp.QTensor) -> fp.QTensor:
        """Dequantized float64 arithmetic, then rounding onto the output grid."""
        spec, layer = self.specs[i], self.layers[i]
        x = fp.dequantize(xq)
        w = layer.dequant_weight()
        if spec.kind == "conv":
            y = ad.conv2d_forward(x, w, spec.stride, spec.padding)
        else:
            y = ad.conv2d_transpose_forward(x, w, spec.stride, spec.padding, spec.output_padding)
        y = y + layer.bias_value().reshape(1, -1, 1, 1)
        if spec.relu:
            y = np.maximum(y, 0.0)
        return quantize_to_grid(y, self.output_grid(i))

    # integer path -----------------------------------------------------------------
    def integer_layer(self, i: int, xq: fp.QTensor) -> fp.QTensor:
        spec, layer = self.specs[i], self.layers[i]
        grid = self.output_grid(i)
        zero = grid.zero if grid.zero.size > 1 else int(grid.zero.reshape(-1)[0])
        return fp.qconv_integer(xq, layer.weight, layer.bias, grid.scale, zero,
                                bias_ref=layer.bias_ref, stride=spec.stride, padding=spec.padding,
                                transpose=spec.kind == "tconv", output_padding=spec.output_padding,
                                relu=spec.relu, out_bits=grid.bits)

    def run(self, transform: str, x: np.ndarray, integer: bool = True) -> fp.QTensor:
        """Quantize real input ``x`` onto the first layer's grid, run the chain."""
        idx = self.float_model.transform_layers(transform)
        q = quantize_to_grid(np.asarray(x, dtype=np.float64), self.layers[idx[0]].input_grid)
        step = self.integer_layer if integer else self.simulate_layer
        for i in idx:
            q = step(i, q)
        return q

    # codec-level helpers ------------------------------------------------------------
    def analyze(self, pixels: np.ndarray, integer: bool = True) -> np.ndarray:
        """8-bit pixels (N, 1, H, W) -> integer latent."""
        x = np.asarray(pixels, dtype=np.float64) / 255.0
        return self.run("g_a", x, integer).values

    def synthesize(self, y_hat: np.ndarray, integer: bool = True) -> np.ndarray:
        """Integer latent -> 8-bit pixels."""
        return self.run("g_s", y_hat, integer).values.astype(np.uint8)

    def hyper_analyze(self, y_hat: np.ndarray, integer: bool = True) -> np.ndarray:
        return self.run("h_a", y_hat, integer).values

    def hyper_scale_index(self, z_hat: np.ndarray, integer: bool = True) -> np.ndarray:
        ls = self.run("h_s", z_hat, integer).values.astype(np.float64) * 2.0 ** -LOG_SCALE_FRAC_BITS
        return scale_index(np.clip(ls, LOG_SCALE_MIN, LOG_SCALE_MAX))
