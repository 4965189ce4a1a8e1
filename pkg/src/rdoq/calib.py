"""Layer-by-layer rate-distortion optimized post-training quantization.

Each layer owns three quantizers (input activation, weight, bias) whose
ranges come from observed min/max times learnable multipliers ``N``.
Weights additionally carry a rounding-offset tensor ``V``.  Layers are
calibrated in order while earlier layers stay frozen and later layers stay
float.  Min-Max, grid-search and MSE-optimized baselines share the same
machinery.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import fixedpoint as fp
from . import licnet
from . import tensorad as ad
from .licnet import LayerSpec, LicModel
from .qmodel import FrozenLayer, Grid, QuantizedModel, quantize_to_grid
from .tensorad import Tensor

log = logging.getLogger(__name__)

# Rectified sigmoid stretch for the rounding offsets.
ZETA = 1.1
GAMMA = -0.1
N_FLOOR = 1e-2
GRID_LOW = 0.5
# Hard-rounded checkpoints evaluated per layer; the best one is kept.
CHECKPOINTS = 12

GRANULARITIES = ("channel", "layer")
INITS = ("minmax", "gridsearch")
ROUNDINGS = ("adaptive", "nearest")
OBJECTIVES = ("rd", "mse")
# Transforms fed by an integer latent rather than a real-valued activation.
LATENT_INPUTS = ("g_s", "h_a", "h_s")


class DegenerateRangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CalibConfig:
    calib_size: int = 10
    steps: int = 300
    lr: float = 1e-3
    lr_v: float = 1e-2
    lambda_t: float = 1.0
    lambda_reg: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    w_bits: int = 8
    x_bits: int = 8
    b_bits: int = 8
    granularity: str = "channel"
    init: str = "minmax"
    rounding: str = "adaptive"
    bias: str = "rescaled"
    objective: str = "rd"
    grid_steps: int = 10
    weight_nr: int = 24
    act_nr: int = 24
    seed: int = 0

    def __post_init__(self):
        for bits in (self.w_bits, self.x_bits, self.b_bits):
            if bits not in fp.SUPPORTED_BITS:
                raise ValueError(f"unsupported bit width {bits}")
        checks = ((self.granularity, GRANULARITIES), (self.init, INITS),
                  (self.rounding, ROUNDINGS), (self.bias, ("rescaled", "int32")),
                  (self.objective, OBJECTIVES))
        for value, allowed in checks:
            if value not in allowed:
                raise ValueError(f"{value!r} not in {allowed}")
        if self.steps < 0 or self.calib_size < 1:
            raise ValueError("steps must be >= 0 and calib_size >= 1")

    def with_bits(self, bits: int) -> "CalibConfig":
        return replace(self, w_bits=bits, x_bits=bits, b_bits=bits)


# range statistics and per-tensor quantizers ---------------------------------------
def channel_range(x: np.ndarray, axis: Optional[int]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (or per-tensor) min/max, extended to include zero."""
    x = np.asarray(x, dtype=np.float64)
    if axis is None:
        lo, hi = np.array([x.min()]), np.array([x.max()])
    else:
        red = tuple(a for a in range(x.ndim) if a != axis)
        lo, hi = x.min(axis=red), x.max(axis=red)
    return np.minimum(lo, 0.0), np.maximum(hi, 0.0)


@dataclass
class TensorQuant:
    """One quantizer: observed range, bit width and range multipliers ``N``.

    ``axis`` is the channel axis of the quantized tensor, or ``None`` for a
    single per-layer range.
    """

    lo: np.ndarray
    hi: np.ndarray
    bits: int
    axis: Optional[int]
    n: np.ndarray = None
    n_r: int = fp.DEFAULT_NR
    trainable: bool = True

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        if self.n is None:
            self.n = np.ones_like(self.lo)
        self.n = np.atleast_1d(np.asarray(self.n, dtype=np.float64))
        if np.any(self.n <= 0):
            raise ValueError("range multipliers must be positive")

    @property
    def qmax(self) -> int:
        return 2 ** self.bits - 1

    @property
    def degenerate(self) -> np.ndarray:
        return self.hi - self.lo <= 0

    def real_scale(self, n=None) -> np.ndarray:
        n = self.n if n is None else np.asarray(n, dtype=np.float64)
        return np.where(self.degenerate, 0.0, n * (self.hi - self.lo) / self.qmax)

    def fixed(self, n=None) -> fp.FixedScale:
        """Resolved scale ``Γ(N (max - min) / (2^b - 1))``; degenerate -> smallest."""
        raw = np.atleast_1d(fp.fix_scale(self.real_scale(n), self.n_r).raw)
        raw = np.where(self.degenerate | (raw < 1), 1, raw)
        if self.axis is None:
            return fp.FixedScale(int(raw[0]), self.n_r)
        return fp.FixedScale(raw.astype(np.int64), self.n_r)

    def zero(self, n=None, scale: Optional[fp.FixedScale] = None):
        n = self.n if n is None else np.asarray(n, dtype=np.float64)
        scale = scale or self.fixed(n)
        z = fp.compute_zero_point(n * self.lo, scale, self.bits)
        z = np.atleast_1d(z)
        return int(z[0]) if self.axis is None else z

    def quantize(self, x, n=None) -> fp.QTensor:
        scale = self.fixed(n)
        return fp.quantize_affine(x, scale, self.zero(n, scale), self.bits, self.axis)

    def fake_quant(self, x, n=None) -> np.ndarray:
        return fp.dequantize(self.quantize(x, n))


def init_minmax(x: np.ndarray, bit_width: int, granularity: str = "channel", axis: int = 0,
                n_r: int = fp.DEFAULT_NR) -> TensorQuant:
    """N = 1, scale ``(max - min) / (2^b - 1)`` per channel or per tensor."""
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    ax = axis if granularity == "channel" else None
    lo, hi = channel_range(x, ax)
    tq = TensorQuant(lo, hi, bit_width, ax, n_r=n_r)
    if tq.degenerate.any():
        warnings.warn(f"{int(tq.degenerate.sum())} channel(s) have max == min; "
                      "using the smallest scale", DegenerateRangeWarning, stacklevel=2)
    return tq


def _channel_sq_error(x: np.ndarray, tq: TensorQuant, n: np.ndarray) -> np.ndarray:
    err = (tq.fake_quant(x, n) - x) ** 2
    if tq.axis is None:
        return np.array([err.sum()])
    red = tuple(a for a in range(err.ndim) if a != tq.axis)
    return err.sum(axis=red)


def init_gridsearch(x: np.ndarray, bit_width: int, granularity: str = "channel", axis: int = 0,
                    steps: int = 10, n_r: int = fp.DEFAULT_NR) -> TensorQuant:
    """Pick N from ``steps`` uniform values in [0.5, 1.0] minimizing squared error.

    Channels are independent, so each channel takes its own argmin; ties go
    to the larger N.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateRangeWarning)
        tq = init_minmax(x, bit_width, granularity, axis, n_r)
    grid = np.linspace(1.0, GRID_LOW, steps)
    errs = np.stack([_channel_sq_error(x, tq, np.full_like(tq.n, g)) for g in grid])
    tq.n = grid[np.argmin(errs, axis=0)]
    return tq


def latent_input(model: LicModel, i: int) -> bool:
    """True for the first layer of a transform that consumes an integer latent."""
    spec = model.layers[i]
    return spec.transform in LATENT_INPUTS and model.transform_layers(spec.transform)[0] == i


def latent_quant(channels: int, bits: int, n_r: int = fp.DEFAULT_NR) -> TensorQuant:
    """Fixed unit-step grid, zero at mid-range: integer latents pass through exactly."""
    half = 2 ** (bits - 1)
    return TensorQuant(np.full(channels, -half), np.full(channels, half - 1), bits, 1,
                       n_r=n_r, trainable=False)


def input_quant(model: LicModel, i: int, x_float: np.ndarray, config: CalibConfig,
                init: Optional[str] = None) -> TensorQuant:
    if latent_input(model, i):
        return latent_quant(model.layers[i].in_ch, config.x_bits, config.act_nr)
    if (init or config.init) == "gridsearch":
        return init_gridsearch(x_float, config.x_bits, "channel", 1, config.grid_steps, config.act_nr)
    return init_minmax(x_float, config.x_bits, "channel", 1, config.act_nr)


def _init_quant(x, bits, granularity, axis, config: CalibConfig, n_r) -> TensorQuant:
    if config.init == "gridsearch":
        return init_gridsearch(x, bits, granularity, axis, config.grid_steps, n_r)
    return init_minmax(x, bits, granularity, axis, n_r)


@dataclass
class LayerQuantParams:
    """Learnable quantization state of one layer."""

    name: str
    x: TensorQuant  # input activation, per input channel
    w: TensorQuant  # weight, per output channel or per layer
    b: TensorQuant  # bias, per layer
    v: Optional[np.ndarray] = None  # rounding offsets (adaptive rounding only)
    flagged: bool = False

    def copy(self) -> "LayerQuantParams":
        return LayerQuantParams(self.name, replace(self.x, n=self.x.n.copy()),
                                replace(self.w, n=self.w.n.copy()), replace(self.b, n=self.b.n.copy()),
                                None if self.v is None else self.v.copy(), self.flagged)


def rectified_sigmoid(v):
    """``clip(sigmoid(v) (ζ - γ) + γ, 0, 1)`` for arrays or Tensors."""
    if isinstance(v, Tensor):
        return ad.clamp(ad.sigmoid(v) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)
    return np.clip(ad._sigmoid_np(np.asarray(v, dtype=np.float64)) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def init_offsets(w: np.ndarray, tq: TensorQuant) -> np.ndarray:
    """V such that ``h(V)`` equals the fractional part of ``w / s``."""
    s = _bcast(np.asarray(tq.fixed().value, dtype=np.float64), w.ndim, tq.axis)
    frac = w / s - np.floor(w / s)
    p = np.clip((frac - GAMMA) / (ZETA - GAMMA), 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


def _bcast(arr, ndim: int, axis: Optional[int]):
    arr = np.asarray(arr)
    if axis is None or arr.size == 1:
        return arr.reshape((1,) * ndim) if ndim else arr.reshape(())
    shape = [1] * ndim
    shape[axis] = arr.size
    return arr.reshape(shape)


def weight_axis(spec: LayerSpec) -> int:
    return 0 if spec.kind == "conv" else 1


def init_layer(model: LicModel, i: int, x_float: np.ndarray, config: CalibConfig) -> LayerQuantParams:
    spec = model.layers[i]
    w = model.params[f"{spec.name}.weight"].astype(np.float64)
    b = model.params[f"{spec.name}.bias"].astype(np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateRangeWarning)
        xq = input_quant(model, i, x_float, config)
        wq = _init_quant(w, config.w_bits, config.granularity, weight_axis(spec), config, config.weight_nr)
        bq = _init_quant(b, config.b_bits, "layer", 0, config, config.act_nr)
    if xq.degenerate.any():
        log.info("layer %s: %d dead input channel(s)", spec.name, int(xq.degenerate.sum()))
    v = init_offsets(w, wq) if config.rounding == "adaptive" else None
    return LayerQuantParams(spec.name, xq, wq, bq, v)


# freezing --------------------------------------------------------------------------
def _bias_ref(x_scale: fp.FixedScale) -> fp.FixedScale:
    return fp.FixedScale(int(np.max(x_scale.raw)), x_scale.n_r, x_scale.b_s)


def freeze_layer(model: LicModel, i: int, p: LayerQuantParams, config: CalibConfig) -> FrozenLayer:
    """Resolve scales through Γ, hard-round V and build the integer bias."""
    spec = model.layers[i]
    w = model.params[f"{spec.name}.weight"].astype(np.float64)
    b = model.params[f"{spec.name}.bias"].astype(np.float64)
    x_scale = p.x.fixed()
    x_zero = np.atleast_1d(p.x.zero(scale=x_scale))
    w_scale = p.w.fixed()
    w_zero = p.w.zero(scale=w_scale)
    if p.v is None:
        wq = fp.quantize_affine(w, w_scale, w_zero, p.w.bits, p.w.axis)
    else:
        s = _bcast(np.asarray(w_scale.value, dtype=np.float64), w.ndim, p.w.axis)
        z = _bcast(np.asarray(w_zero), w.ndim, p.w.axis)
        up = (rectified_sigmoid(p.v) >= 0.5).astype(np.int64)
        ints = np.clip(np.floor(w / s).astype(np.int64) + up + z, 0, p.w.qmax)
        wq = fp.QTensor(ints, p.w.bits, w_scale, np.atleast_1d(w_zero), p.w.axis)
    ref = _bias_ref(x_scale)
    if config.bias == "rescaled":
        bq = p.b.quantize(b)
        bias = fp.rescale_bias(bq.centered(), bq.scale, w_scale, ref)
    else:
        bq = None
        bias = fp.quantize_bias_int32(b, w_scale, ref)
    return FrozenLayer(spec.name, x_scale, x_zero, p.x.bits, wq, bias, ref, config.bias, bq,
                       p.w.n.copy(), p.x.n.copy(), float(p.b.n[0]))


def frozen_forward(spec: LayerSpec, layer: FrozenLayer, x: np.ndarray) -> np.ndarray:
    """Real-valued output of a frozen layer before output rounding."""
    xq = quantize_to_grid(np.asarray(x, dtype=np.float64), layer.input_grid)
    xh = fp.dequantize(xq)
    w = layer.dequant_weight()
    if spec.kind == "conv":
        y = ad.conv2d_forward(xh, w, spec.stride, spec.padding)
    else:
        y = ad.conv2d_transpose_forward(xh, w, spec.stride, spec.padding, spec.output_padding)
    y = y + layer.bias_value().reshape(1, -1, 1, 1)
    return np.maximum(y, 0.0) if spec.relu else y


# differentiable fake quantization ------------------------------------------------------
def _fixed_ste(tq: TensorQuant, n: Tensor) -> Tensor:
    """Real scale as a Tensor whose forward value is the Γ-resolved scale."""
    nc = ad.clamp(n, N_FLOOR, None)
    rng = np.where(tq.degenerate, 0.0, (tq.hi - tq.lo) / tq.qmax).astype(np.float32)
    s = nc * rng
    fixed = np.atleast_1d(np.asarray(tq.fixed(nc.data.astype(np.float64)).value, dtype=np.float32))
    return s + Tensor(fixed - s.data)


def _fake_quant_tensor(x: Tensor, tq: TensorQuant, n: Tensor, axis: Optional[int],
                       offsets: Optional[Tensor] = None) -> Tensor:
    s_vec = _fixed_ste(tq, n)
    n_eff = np.maximum(n.data.astype(np.float64), N_FLOOR)
    z = np.atleast_1d(tq.zero(n_eff)).astype(np.float32)
    shape = [1] * x.ndim
    if axis is not None and s_vec.shape[0] > 1:
        shape[axis] = s_vec.shape[0]
    s = ad.reshape(s_vec, tuple(shape))
    zt = z.reshape(shape) if z.size > 1 else z.reshape(())
    if offsets is None:
        q = ad.ste_round(x / s) + zt
    else:
        q = ad.ste_floor(x / s) + rectified_sigmoid(offsets) + zt
    q = ad.clamp(q, 0.0, float(tq.qmax))
    return (q - zt) * s


class _LiveLayer:
    """Differentiable quantized version of one layer during calibration."""

    def __init__(self, model: LicModel, i: int, p: LayerQuantParams, config: CalibConfig):
        self.spec = model.layers[i]
        self.p = p
        self.config = config
        self.w = Tensor(model.params[f"{self.spec.name}.weight"])
        self.b = Tensor(model.params[f"{self.spec.name}.bias"])
        self.n_w = Tensor(p.w.n.astype(np.float32), requires_grad=not p.w.degenerate.all())
        self.n_x = Tensor(p.x.n.astype(np.float32),
                          requires_grad=p.x.trainable and not p.x.degenerate.all())
        self.n_b = Tensor(p.b.n.astype(np.float32), requires_grad=config.bias == "rescaled")
        self.v = None if p.v is None else Tensor(p.v.astype(np.float32), requires_grad=True)

    def n_params(self) -> list[Tensor]:
        return [t for t in (self.n_w, self.n_x, self.n_b) if t.requires_grad]

    def sync(self):
        """Copy the live tensors back into the numpy state."""
        self.p.w.n = np.maximum(self.n_w.data.astype(np.float64), N_FLOOR)
        self.p.x.n = np.maximum(self.n_x.data.astype(np.float64), N_FLOOR)
        self.p.b.n = np.maximum(self.n_b.data.astype(np.float64), N_FLOOR)
        if self.v is not None:
            self.p.v = self.v.data.astype(np.float64)

    def quantized_input(self, x: Tensor) -> Tensor:
        return _fake_quant_tensor(x, self.p.x, self.n_x, 1)

    def quantized_weight(self) -> Tensor:
        return _fake_quant_tensor(self.w, self.p.w, self.n_w, self.p.w.axis, self.v)

    def quantized_bias(self) -> Tensor:
        s_w = _fixed_ste(self.p.w, self.n_w)
        s_x = _fixed_ste(self.p.x, self.n_x)
        pick = np.zeros(s_x.shape, dtype=np.float32)
        pick[int(np.argmax(s_x.data))] = 1.0
        unit = s_w * ad.sum_(s_x * pick)  # accumulator step per output channel
        if self.config.bias == "rescaled":
            b_hat = _fake_quant_tensor(self.b, self.p.b, self.n_b, None)
            return ad.ste_round(b_hat / unit) * unit
        return ad.ste_round(self.b / unit) * unit

    def __call__(self, x: Tensor) -> Tensor:
        return licnet.apply_layer(self.spec, self.quantized_input(x), self.quantized_weight(),
                                  self.quantized_bias())

    def regularizer(self, beta: float) -> Tensor:
        if self.v is None:
            return Tensor(np.float32(0.0))
        h = rectified_sigmoid(self.v)
        return ad.mean(1.0 - ad.power(ad.abs_(h * 2.0 - 1.0), beta))


def _frozen_fn(spec: LayerSpec, layer: FrozenLayer) -> Callable[[Tensor], Tensor]:
    def fn(x: Tensor) -> Tensor:
        return Tensor(frozen_forward(spec, layer, x.data).astype(np.float32))
    return fn


# losses ---------------------------------------------------------------------------------
def task_loss(j_hat, j0):
    """``(Ĵ - J0)^2``; averaged over images when given per-image arrays."""
    if isinstance(j_hat, Tensor):
        d = j_hat - Tensor(np.asarray(j0, dtype=j_hat.data.dtype))
        return ad.mean(d * d)
    d = np.asarray(j_hat, dtype=np.float64) - np.asarray(j0, dtype=np.float64)
    return float(np.mean(d * d))


def layer_loss(target, output, v=None, beta: float = 2.0, lambda_reg: float = 0.01):
    """``mean ||Λ(wx) - Λ(ŵx̂)||^2 + λ_reg mean(1 - |2 h(V) - 1|^β)``.

    Works on Tensors (differentiable) or arrays.
    """
    if isinstance(output, Tensor):
        d = output - Tensor(np.asarray(target.data if isinstance(target, Tensor) else target,
                                       dtype=output.data.dtype))
        loss = ad.mean(d * d)
        if v is not None:
            vt = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float32))
            h = rectified_sigmoid(vt)
            loss = loss + ad.mean(1.0 - ad.power(ad.abs_(h * 2.0 - 1.0), beta)) * lambda_reg
        return loss
    d = np.asarray(output, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    loss = float(np.mean(d * d))
    if v is not None:
        h = rectified_sigmoid(v)
        loss += lambda_reg * float(np.mean(1.0 - np.abs(2.0 * h - 1.0) ** beta))
    return loss


def beta_schedule(step: int, steps: int, start: float = 20.0, end: float = 2.0) -> float:
    if steps <= 1:
        return end
    return start + (end - start) * step / (steps - 1)


# forward plumbing --------------------------------------------------------------------------
@dataclass
class FloatTrace:
    """Float-model activations on the calibration images."""

    inputs: list  # per layer input, float32
    outputs: list  # per layer output (after activation)
    j0: np.ndarray  # per image float J with hard latent rounding


def float_trace(model: LicModel, images: np.ndarray) -> FloatTrace:
    params = model.tensors()
    n = len(model.layers)
    inputs, outputs = [None] * n, [None] * n

    def hook(i):
        spec = model.layers[i]

        def fn(x):
            out = licnet.apply_layer(spec, x, params[f"{spec.name}.weight"], params[f"{spec.name}.bias"])
            inputs[i], outputs[i] = x.data, out.data
            return out
        return fn

    with ad.no_grad():
        res = licnet.forward_rd(model, images, "hard", params=params,
                                layer_fns={i: hook(i) for i in range(n)})
    return FloatTrace(inputs, outputs, res.j.data.astype(np.float64))


class _Pipeline:
    """Forward from the input of layer ``l`` to per-image J.

    Layers before ``l`` are frozen and their effect is cached; layers after
    ``l`` run in float.
    """

    def __init__(self, model: LicModel, frozen: list, l: int, images: np.ndarray):
        self.model = model
        self.l = l
        self.spec = model.layers[l]
        self.images = Tensor(images)
        self.params = model.tensors()
        self.pixels = images.shape[2] * images.shape[3]
        fns = {i: _frozen_fn(model.layers[i], frozen[i]) for i in range(l)}
        self.chain = model.transform_layers(self.spec.transform)
        self.pos = self.chain.index(l)
        captured = {}

        def capture(i):
            def fn(x):
                captured[i] = x
                return fns[i](x) if i in fns else licnet.apply_layer(
                    model.layers[i], x, self.params[f"{model.layers[i].name}.weight"],
                    self.params[f"{model.layers[i].name}.bias"])
            return fn

        all_fns = {i: capture(i) for i in range(len(model.layers))}
        with ad.no_grad():
            res = licnet.forward_rd(model, images, "hard", params=self.params, layer_fns=all_fns)
        self.x_in = Tensor(captured[l].data)
        self.y_hat = Tensor(res.y_hat.data)
        self.z_hat = None if res.z_hat is None else Tensor(res.z_hat.data)
        self.bits = res.bits.data
        self.mse = res.mse.data

    def _run(self, x: Tensor, fn: Callable, start: int, chain: list) -> Tensor:
        for k in chain[start:]:
            spec = self.model.layers[k]
            if k == self.l:
                x = fn(x)
            else:
                x = licnet.apply_layer(spec, x, self.params[f"{spec.name}.weight"],
                                       self.params[f"{spec.name}.bias"])
        return x

    def __call__(self, fn: Callable[[Tensor], Tensor]) -> tuple[Tensor, Tensor]:
        """Returns (per-image J, output of layer l)."""
        model, t = self.model, self.spec.transform
        out_l = {}

        def live(x):
            out_l["v"] = fn(x)
            return out_l["v"]

        lam = model.lam * 255.0 ** 2
        if t == "g_s":
            x_hat = ad.clamp(self._run(self.x_in, live, self.pos, self.chain), 0.0, 1.0)
            diff = x_hat - self.images
            j = ad.mean(diff * diff, axis=(1, 2, 3)) * lam + Tensor(
                (self.bits / self.pixels).astype(np.float32))
            return j, out_l["v"]
        dist = Tensor((self.mse * lam).astype(np.float32))
        if t == "g_a":
            y = self._run(self.x_in, live, self.pos, self.chain)
            y_hat = ad.ste_round(y)
            z_hat = None
            if model.config.hyperprior:
                z_hat = ad.ste_round(licnet.hyper_analyze(model, y_hat, self.params))
            bits = licnet.estimate_rate(model, y_hat, z_hat, self.params)
            x_hat = licnet.synthesize(model, y_hat, self.params)
            diff = x_hat - self.images
            j = ad.mean(diff * diff, axis=(1, 2, 3)) * lam + bits * (1.0 / self.pixels)
            return j, out_l["v"]
        if t == "h_a":
            z_hat = ad.ste_round(self._run(self.x_in, live, self.pos, self.chain))
        else:
            z_hat = self.z_hat
        if t == "h_s":
            raw = self._run(self.x_in, live, self.pos, self.chain)
            log_scale = ad.clamp(raw, licnet.LOG_SCALE_MIN, licnet.LOG_SCALE_MAX)
        else:
            log_scale = licnet.hyper_synthesize(model, z_hat, self.params)
        bits = (licnet.bits_from_likelihood(licnet.conditional_likelihood(self.y_hat, log_scale))
                + licnet.bits_from_likelihood(licnet.factorized_likelihood(z_hat, self.params, "entropy_z")))
        return dist + bits * (1.0 / self.pixels), out_l["v"]


# calibration -------------------------------------------------------------------------------
@dataclass
class LayerReport:
    index: int
    name: str
    init_loss: float
    final_loss: float
    steps: int
    wall_s: float
    status: str = "ok"


@dataclass
class CalibReport:
    config: CalibConfig
    layers: list = field(default_factory=list)
    digests: list = field(default_factory=list)  # digests of frozen layers after each step

    @property
    def failed(self) -> list:
        return [r for r in self.layers if r.status != "ok"]

    def to_text(self) -> str:
        lines = ["# calibration report",
                 "# " + " ".join(f"{k}={v}" for k, v in self.config.__dict__.items()),
                 "index,name,init_loss,final_loss,steps,wall_s,status"]
        for r in self.layers:
            lines.append(f"{r.index},{r.name},{r.init_loss:.9g},{r.final_loss:.9g},"
                         f"{r.steps},{r.wall_s:.3f},{r.status}")
        return "\n".join(lines) + "\n"


def _hard_loss(model, i, p, config, pipe: _Pipeline, trace: FloatTrace) -> float:
    """Joint loss of the frozen (hard-rounded) state of layer ``i``."""
    layer = freeze_layer(model, i, p, config)
    with ad.no_grad():
        j, out = pipe(_frozen_fn(model.layers[i], layer))
    return (config.lambda_t * task_loss(j.data, trace.j0)
            + layer_loss(trace.outputs[i], out.data))


def calibrate_layer(model: LicModel, i: int, p: LayerQuantParams, config: CalibConfig,
                    pipe: _Pipeline, trace: FloatTrace) -> tuple[LayerQuantParams, LayerReport]:
    """Optimize N_w, N_x, N_b and V of layer ``i`` on λ_t L_task + L_lq."""
    t0 = time.perf_counter()
    init = p.copy()
    init_loss = _hard_loss(model, i, init, config, pipe, trace)
    status = "ok"
    if config.steps == 0:
        return p, LayerReport(i, p.name, init_loss, init_loss, 0, time.perf_counter() - t0)
    live = _LiveLayer(model, i, p, config)
    groups = [(live.n_params(), config.lr)]
    if live.v is not None:
        groups.append(([live.v], config.lr_v))
    opt = ad.Adam(groups)
    target = trace.outputs[i]
    best, best_loss = init, init_loss
    check = max(1, config.steps // CHECKPOINTS)
    for step in range(config.steps):
        beta = beta_schedule(step, config.steps, config.beta_start, config.beta_end)
        opt.zero_grad()
        j, out = pipe(live)
        loss = task_loss(j, trace.j0) * config.lambda_t + layer_loss(
            target, out, live.v, beta, config.lambda_reg)
        if not np.isfinite(loss.item()):
            status = f"non-finite loss at step {step}"
            break
        loss.backward()
        opt.step()
        if (step + 1) % check == 0 or step == config.steps - 1:
            live.sync()
            hard = _hard_loss(model, i, p, config, pipe, trace)
            if np.isfinite(hard) and hard < best_loss:
                best, best_loss = p.copy(), hard
    if status != "ok":
        log.warning("layer %s: %s; restoring init", p.name, status)
        best, best_loss = init, init_loss
        best.flagged = True
    p, final_loss = best, best_loss
    return p, LayerReport(i, p.name, init_loss, final_loss, config.steps,
                          time.perf_counter() - t0, status)


def _mse_optimize(x: np.ndarray, tq: TensorQuant, axis: Optional[int], steps: int, lr: float):
    """Adam on the range multipliers of one tensor against ``mean (x - x̂)^2``.

    The best hard-rounded checkpoint is kept, so the error never grows.
    """
    if steps == 0 or tq.degenerate.all():
        return
    xt = Tensor(np.asarray(x, dtype=np.float32))
    n = Tensor(tq.n.astype(np.float32), requires_grad=True)
    opt = ad.Adam([([n], lr)])
    hard = lambda nn: float(np.mean((tq.fake_quant(x, nn) - x) ** 2))
    best, best_err = tq.n.copy(), hard(tq.n)
    check = max(1, steps // CHECKPOINTS)
    for step in range(steps):
        opt.zero_grad()
        d = _fake_quant_tensor(xt, tq, n, axis) - xt
        loss = ad.mean(d * d)
        loss.backward()
        opt.step()
        if (step + 1) % check == 0 or step == steps - 1:
            cand = np.maximum(n.data.astype(np.float64), N_FLOOR)
            err = hard(cand)
            if err < best_err:
                best, best_err = cand, err
    tq.n = best


def mse_ptq_layer(model: LicModel, i: int, p: LayerQuantParams, x_float: np.ndarray,
                  config: CalibConfig) -> LayerQuantParams:
    """Per-tensor MSE fitting of the weight, activation and bias ranges."""
    spec = model.layers[i]
    _mse_optimize(model.params[f"{spec.name}.weight"], p.w, p.w.axis, config.steps, config.lr)
    if p.x.trainable:
        _mse_optimize(x_float, p.x, 1, config.steps, config.lr)
    if config.bias == "rescaled":
        _mse_optimize(model.params[f"{spec.name}.bias"], p.b, None, config.steps, config.lr)
    return p


def calibrate_model(model: LicModel, images: np.ndarray, config: CalibConfig, *,
                    start: Optional[QuantizedModel] = None, start_layer: int = 0,
                    on_layer: Optional[Callable[[int, list], None]] = None
                    ) -> tuple[QuantizedModel, CalibReport]:
    """Quantize every layer in order: encoder, hyper pair, decoder.

    With ``start`` given, layers before ``start_layer`` are copied from it
    unchanged and calibration resumes at ``start_layer``.
    ``on_layer(i, frozen)`` is called after each layer is frozen.
    """
    images = np.asarray(images, dtype=np.float32)
    if config.objective == "mse" and config.rounding != "nearest":
        config = replace(config, rounding="nearest")
    trace = float_trace(model, images)
    n = len(model.layers)
    frozen: list = [None] * n
    if start is not None:
        frozen[:start_layer] = start.layers[:start_layer]
    report = CalibReport(config)
    for i in range(start_layer, n):
        p = init_layer(model, i, trace.inputs[i], config)
        if config.objective == "mse":
            t0 = time.perf_counter()
            p = mse_ptq_layer(model, i, p, trace.inputs[i], config)
            rep = LayerReport(i, p.name, math.nan, math.nan, config.steps, time.perf_counter() - t0)
        else:
            pipe = _Pipeline(model, frozen, i, images)
            p, rep = calibrate_layer(model, i, p, config, pipe, trace)
        frozen[i] = freeze_layer(model, i, p, config)
        report.layers.append(rep)
        report.digests.append([f.digest() for f in frozen[:i + 1]])
        log.info("calibrated %s: %.6g -> %.6g (%.1fs)", rep.name, rep.init_loss, rep.final_loss, rep.wall_s)
        if on_layer is not None:
            on_layer(i, frozen)
    tag = {"w_bits": config.w_bits, "x_bits": config.x_bits, "b_bits": config.b_bits,
           "granularity": config.granularity, "bias": config.bias, "seed": config.seed}
    return QuantizedModel(model, frozen, tag), report


def minmax_model(model: LicModel, images: np.ndarray, config: CalibConfig) -> QuantizedModel:
    """Min-Max baseline without optimization: N = 1, nearest rounding."""
    trace = float_trace(model, np.asarray(images, dtype=np.float32))
    cfg = replace(config, init="minmax", rounding="nearest", steps=0)
    frozen = []
    for i, spec in enumerate(model.layers):
        w = model.params[f"{spec.name}.weight"]
        b = model.params[f"{spec.name}.bias"]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateRangeWarning)
            p = LayerQuantParams(
                spec.name,
                input_quant(model, i, trace.inputs[i], cfg),
                init_minmax(w, cfg.w_bits, cfg.granularity, weight_axis(spec), cfg.weight_nr),
                init_minmax(b, cfg.b_bits, "layer", 0, cfg.act_nr))
        frozen.append(freeze_layer(model, i, p, cfg))
    return QuantizedModel(model, frozen, {"w_bits": cfg.w_bits, "x_bits": cfg.x_bits,
                                          "b_bits": cfg.b_bits, "granularity": cfg.granularity,
                                          "bias": cfg.bias, "seed": cfg.seed})


def mse_ptq(model: LicModel, images: np.ndarray, config: CalibConfig) -> QuantizedModel:
    """MSE-optimized PTQ baseline (per-tensor squared error, no task loss)."""
    return calibrate_model(model, images, replace(config, objective="mse", rounding="nearest"))[0]
