"""Desk-scale learned image codec.

Analysis/synthesis transforms built from strided convolutions and ReLU,
an optional two-layer hyperprior pair, a per-channel logistic-mixture
entropy model, the rate-distortion loss and the float training loop.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensorad as ad
from .tensorad import Tensor

log = logging.getLogger(__name__)

LAMBDA_LADDER = (0.0018, 0.0035, 0.0067, 0.013, 0.025, 0.0483)
DESK_LADDER = (0.0018, 0.013, 0.0483)

PROB_FLOOR = 2.0 ** -23
# Hyperprior scale range, in log domain, and the number of coding tables.
LOG_SCALE_MIN = math.log(0.11)
LOG_SCALE_MAX = math.log(64.0)
SCALE_LEVELS = 128

TRANSFORMS = ("g_a", "h_a", "h_s", "g_s")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    transform: str
    kind: str  # "conv" or "tconv"
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    relu: bool

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def output_padding(self) -> int:
        return self.stride - 1 if self.kind == "tconv" else 0

    @property
    def weight_shape(self) -> tuple:
        if self.kind == "conv":
            return (self.out_ch, self.in_ch, self.kernel, self.kernel)
        return (self.in_ch, self.out_ch, self.kernel, self.kernel)


@dataclass(frozen=True)
class LicConfig:
    channels: int = 16
    latent: int = 32
    hyperprior: bool = False
    hyper_channels: int = 16
    mixture: int = 2


def build_architecture(cfg: LicConfig) -> list[LayerSpec]:
    """Layer list in calibration order: encoder, hyper pair, decoder."""
    n, m, nh = cfg.channels, cfg.latent, cfg.hyper_channels
    layers = [
        LayerSpec("g_a.0", "g_a", "conv", 1, n, 5, 2, True),
        LayerSpec("g_a.1", "g_a", "conv", n, n, 5, 2, True),
        LayerSpec("g_a.2", "g_a", "conv", n, n, 3, 2, True),
        LayerSpec("g_a.3", "g_a", "conv", n, m, 3, 2, False),
    ]
    if cfg.hyperprior:
        layers += [
            LayerSpec("h_a.0", "h_a", "conv", m, nh, 3, 1, True),
            LayerSpec("h_a.1", "h_a", "conv", nh, nh, 3, 2, False),
            LayerSpec("h_s.0", "h_s", "tconv", nh, nh, 3, 2, True),
            LayerSpec("h_s.1", "h_s", "conv", nh, m, 3, 1, False),
        ]
    layers += [
        LayerSpec("g_s.0", "g_s", "tconv", m, n, 3, 2, True),
        LayerSpec("g_s.1", "g_s", "tconv", n, n, 3, 2, True),
        LayerSpec("g_s.2", "g_s", "tconv", n, n, 5, 2, True),
        LayerSpec("g_s.3", "g_s", "tconv", n, 1, 5, 2, False),
    ]
    return layers


@dataclass
class RdPoint:
    bpp: float
    distortion: float  # MSE on the 0-255 scale
    j: float

    def __post_init__(self):
        if self.bpp < 0 or self.distortion < 0:
            raise ValueError("bpp and distortion must be nonnegative")


@dataclass
class LicModel:
    config: LicConfig
    params: dict
    lam: float
    seed: int = 0
    steps: int = 0
    layers: list = field(default_factory=list)
    curve: list = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            self.layers = build_architecture(self.config)

    def layer_index(self, name: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.name == name:
                return i
        raise KeyError(name)

    def transform_layers(self, transform: str) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.transform == transform]

    def param_names(self) -> list[str]:
        """Parameter names in declaration order."""
        names = []
        for spec in self.layers:
            names += [f"{spec.name}.weight", f"{spec.name}.bias"]
        for prefix in self.entropy_prefixes():
            names += [f"{prefix}.logits", f"{prefix}.means", f"{prefix}.log_scales"]
        return names

    def entropy_prefixes(self) -> list[str]:
        return ["entropy_z"] if self.config.hyperprior else ["entropy_y"]

    def tensors(self, requires_grad: bool = False) -> dict:
        return {k: Tensor(self.params[k], requires_grad=requires_grad) for k in self.param_names()}

    def copy(self) -> "LicModel":
        return LicModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.lam,
                        self.seed, self.steps, list(self.layers), list(self.curve))


def init_model(cfg: LicConfig, lam: float, seed: int = 0, zero: bool = False) -> LicModel:
    rng = np.random.default_rng(seed)
    params = {}
    for spec in build_architecture(cfg):
        fan_in = spec.in_ch * spec.kernel ** 2
        if spec.kind == "tconv":
            fan_in = fan_in / spec.stride ** 2
        std = math.sqrt((2.0 if spec.relu else 1.0) / fan_in)
        w = rng.normal(0.0, std, spec.weight_shape)
        params[f"{spec.name}.weight"] = (np.zeros_like(w) if zero else w).astype(np.float32)
        params[f"{spec.name}.bias"] = np.zeros(spec.out_ch, dtype=np.float32)
    channels = cfg.hyper_channels if cfg.hyperprior else cfg.latent
    prefix = "entropy_z" if cfg.hyperprior else "entropy_y"
    k = cfg.mixture
    params[f"{prefix}.logits"] = np.zeros((channels, k), dtype=np.float32)
    params[f"{prefix}.means"] = np.tile(np.linspace(-0.5, 0.5, k), (channels, 1)).astype(np.float32)
    params[f"{prefix}.log_scales"] = np.full((channels, k), math.log(2.0), dtype=np.float32)
    return LicModel(cfg, params, lam, seed)


# layers ----------------------------------------------------------------------
def apply_layer(spec: LayerSpec, x: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    if spec.kind == "conv":
        out = ad.conv2d(x, w, b, spec.stride, spec.padding)
    else:
        out = ad.conv2d_transpose(x, w, b, spec.stride, spec.padding, spec.output_padding)
    return ad.relu(out) if spec.relu else out


LayerFns = dict  # layer index -> Callable[[Tensor], Tensor]


def _run(model: LicModel, transform: str, x: Tensor, params: dict, layer_fns: Optional[LayerFns]) -> Tensor:
    for i in model.transform_layers(transform):
        spec = model.layers[i]
        if layer_fns and i in layer_fns:
            x = layer_fns[i](x)
        else:
            x = apply_layer(spec, x, params[f"{spec.name}.weight"], params[f"{spec.name}.bias"])
    return x


def _as_batch(x) -> Tensor:
    t = ad.as_tensor(x) if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if t.ndim == 3:
        t = Tensor(t.data[None]) if not t.requires_grad else ad.reshape(t, (1,) + t.shape)
    return t


def check_image(x: Tensor):
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError("expected images shaped (N, 1, H, W)")
    if x.shape[2] % 16 or x.shape[3] % 16 or x.shape[2] == 0 or x.shape[3] == 0:
        raise ValueError("image height and width must be positive multiples of 16")


def analyze(model: LicModel, x, params: Optional[dict] = None, layer_fns: Optional[LayerFns] = None) -> Tensor:
    """Latent ``y = g_a(x)`` for images in [0, 1] shaped (N, 1, H, W)."""
    x = _as_batch(x)
    check_image(x)
    return _run(model, "g_a", x, params or model.tensors(), layer_fns)


def synthesize(model: LicModel, y_hat, params: Optional[dict] = None,
               layer_fns: Optional[LayerFns] = None) -> Tensor:
    """Reconstruction ``clamp(g_s(y_hat), 0, 1)``."""
    y_hat = _as_batch(y_hat)
    if y_hat.ndim != 4 or y_hat.shape[1] != model.config.latent:
        raise ValueError(f"latent must be shaped (N, {model.config.latent}, h, w)")
    return ad.clamp(_run(model, "g_s", y_hat, params or model.tensors(), layer_fns), 0.0, 1.0)


def hyper_analyze(model, y_hat, params=None, layer_fns=None) -> Tensor:
    return _run(model, "h_a", _as_batch(y_hat), params or model.tensors(), layer_fns)


def hyper_synthesize(model, z_hat, params=None, layer_fns=None) -> Tensor:
    """Log-scale map for the main latent, clipped to the coded scale range."""
    raw = _run(model, "h_s", _as_batch(z_hat), params or model.tensors(), layer_fns)
    return ad.clamp(raw, LOG_SCALE_MIN, LOG_SCALE_MAX)


# entropy model -----------------------------------------------------------------
def _mixture_params(params: dict, prefix: str, as_numpy: bool = False):
    logits = params[f"{prefix}.logits"]
    means = params[f"{prefix}.means"]
    log_scales = params[f"{prefix}.log_scales"]
    if as_numpy:
        lg = logits.data if isinstance(logits, Tensor) else logits
        w = np.exp(lg - lg.max(axis=1, keepdims=True))
        w = w / w.sum(axis=1, keepdims=True)
        mu = means.data if isinstance(means, Tensor) else means
        ls = log_scales.data if isinstance(log_scales, Tensor) else log_scales
        return w.astype(np.float64), mu.astype(np.float64), np.exp(ls.astype(np.float64))
    return ad.softmax(logits, axis=1), means, ad.exp(log_scales)


def mixture_cdf(params: dict, prefix: str, channel: int, v: np.ndarray) -> np.ndarray:
    """Continuous CDF of one channel of the factorized model (float64)."""
    w, mu, sc = _mixture_params(params, prefix, as_numpy=True)
    v = np.asarray(v, dtype=np.float64)[:, None]
    z = (v - mu[channel]) / sc[channel]
    return (w[channel] * ad._sigmoid_np(z)).sum(axis=1)


def _logistic_interval(upper: Tensor, lower: Tensor) -> Tensor:
    """``sigmoid(upper) - sigmoid(lower)`` evaluated on the accurate side."""
    flip = np.where((upper.data + lower.data) > 0, -1.0, 1.0).astype(upper.data.dtype)
    return ad.abs_(ad.sigmoid(upper * flip) - ad.sigmoid(lower * flip))


def factorized_likelihood(v_hat: Tensor, params: dict, prefix: str) -> Tensor:
    """Per-element probability of integer-valued ``v_hat`` (N, C, h, w)."""
    w, mu, sc = _mixture_params(params, prefix)
    c, k = w.shape
    total = None
    for j in range(k):
        mu_j = ad.reshape(_col(mu, j), (1, c, 1, 1))
        sc_j = ad.reshape(_col(sc, j), (1, c, 1, 1))
        w_j = ad.reshape(_col(w, j), (1, c, 1, 1))
        centered = v_hat - mu_j
        p = _logistic_interval((centered + 0.5) / sc_j, (centered - 0.5) / sc_j) * w_j
        total = p if total is None else total + p
    return total


def _col(t: Tensor, j: int) -> Tensor:
    mask = np.zeros(t.shape, dtype=t.data.dtype)
    mask[:, j] = 1
    return ad.sum_(t * mask, axis=1)


def conditional_likelihood(y_hat: Tensor, log_scale: Tensor) -> Tensor:
    """Zero-mean logistic likelihood with per-element scale ``exp(log_scale)``."""
    mag = ad.abs_(y_hat)
    sc = ad.exp(log_scale)
    return _logistic_interval((0.5 - mag) / sc, (-0.5 - mag) / sc)


def bits_from_likelihood(p: Tensor) -> Tensor:
    """Per-image bits ``sum(-log2 p)`` with p floored at 2^-23."""
    lp = ad.log(ad.clamp(p, PROB_FLOOR, None))
    return ad.sum_(lp, axis=(1, 2, 3)) * (-1.0 / math.log(2.0))


def scale_levels() -> np.ndarray:
    return np.linspace(LOG_SCALE_MIN, LOG_SCALE_MAX, SCALE_LEVELS)


def scale_index(log_scale: np.ndarray) -> np.ndarray:
    """Nearest coding-table index for each log-scale value."""
    step = (LOG_SCALE_MAX - LOG_SCALE_MIN) / (SCALE_LEVELS - 1)
    idx = np.floor((np.asarray(log_scale, dtype=np.float64) - LOG_SCALE_MIN) / step + 0.5)
    return np.clip(idx, 0, SCALE_LEVELS - 1).astype(np.int64)


def estimate_rate(model: LicModel, y_hat, z_hat=None, params: Optional[dict] = None,
                  layer_fns: Optional[LayerFns] = None) -> Tensor:
    """Per-image bits of the latent (plus hyper-latent when enabled)."""
    params = params or model.tensors()
    y_hat = _as_batch(y_hat)
    if not model.config.hyperprior:
        return bits_from_likelihood(factorized_likelihood(y_hat, params, "entropy_y"))
    if z_hat is None:
        raise ValueError("hyperprior model needs z_hat")
    z_hat = _as_batch(z_hat)
    log_scale = hyper_synthesize(model, z_hat, params, layer_fns)
    return (bits_from_likelihood(conditional_likelihood(y_hat, log_scale))
            + bits_from_likelihood(factorized_likelihood(z_hat, params, "entropy_z")))


def rd_loss(x, x_hat, bits, lam: float, pixel_count: int):
    """``lam * 255^2 * MSE + bits / pixels`` on [0, 1] images.

    Works on Tensors (per-image, differentiable) or plain floats.
    """
    if isinstance(x_hat, Tensor):
        diff = x_hat - x
        mse = ad.mean(diff * diff, axis=(1, 2, 3))
        return mse * (lam * 255.0 ** 2) + bits * (1.0 / pixel_count)
    mse = float(np.mean((np.asarray(x_hat, dtype=np.float64) - np.asarray(x, dtype=np.float64)) ** 2))
    return lam * 255.0 ** 2 * mse + float(bits) / pixel_count


# full pipeline ---------------------------------------------------------------------
@dataclass
class ForwardResult:
    x_hat: Tensor
    y: Tensor
    y_hat: Tensor
    z_hat: Optional[Tensor]
    bits: Tensor  # per image
    mse: Tensor  # per image, 0-1 scale
    j: Tensor  # per image

    def points(self, lam: float) -> list[RdPoint]:
        pixels = self.x_hat.shape[2] * self.x_hat.shape[3]
        return [RdPoint(float(b) / pixels, float(m) * 255.0 ** 2, float(j))
                for b, m, j in zip(self.bits.data, self.mse.data, self.j.data)]


def quantize_latent(v: Tensor, rounding: str, rng: Optional[np.random.Generator]) -> Tensor:
    if rounding == "noise":
        if rng is None:
            raise ValueError("noise rounding needs a seeded rng")
        return ad.noise_round(v, rng)
    if rounding == "hard":
        return ad.ste_round(v)
    raise ValueError(f"unknown rounding mode {rounding!r}")


def forward_rd(model: LicModel, x, rounding: str = "hard", rng: Optional[np.random.Generator] = None,
               params: Optional[dict] = None, layer_fns: Optional[LayerFns] = None,
               y_override: Optional[Tensor] = None) -> ForwardResult:
    """x -> y -> round -> (rate, g_s) -> J for every image in the batch.

    ``layer_fns`` replaces individual layers (used by calibration);
    ``y_override`` supplies an already-rounded latent and skips g_a.
    """
    params = params or model.tensors()
    x = _as_batch(x)
    check_image(x)
    if y_override is None:
        y = analyze(model, x, params, layer_fns)
        y_hat = quantize_latent(y, rounding, rng)
    else:
        y = y_hat = y_override
    z_hat = None
    if model.config.hyperprior:
        z = hyper_analyze(model, y_hat, params, layer_fns)
        z_hat = quantize_latent(z, rounding, rng)
    bits = estimate_rate(model, y_hat, z_hat, params, layer_fns)
    x_hat = synthesize(model, y_hat, params, layer_fns)
    diff = x_hat - x
    mse = ad.mean(diff * diff, axis=(1, 2, 3))
    pixels = x.shape[2] * x.shape[3]
    j = rd_loss(x, x_hat, bits, model.lam, pixels)
    return ForwardResult(x_hat, y, y_hat, z_hat, bits, mse, j)


# training --------------------------------------------------------------------------
TRAIN_CROP = 48  # random training crop, a multiple of the total stride 16


def _augment(batch: np.ndarray, rng: np.random.Generator, crop: Optional[int]) -> np.ndarray:
    """Random flips and transpose of the whole batch, then an optional random crop."""
    flips = rng.integers(0, 2, size=3)
    if flips[0]:
        batch = batch[:, :, :, ::-1]
    if flips[1]:
        batch = batch[:, :, ::-1, :]
    if flips[2] and batch.shape[2] == batch.shape[3]:
        batch = batch.transpose(0, 1, 3, 2)
    if crop is not None and crop < min(batch.shape[2:]):
        r = int(rng.integers(0, batch.shape[2] - crop + 1))
        c = int(rng.integers(0, batch.shape[3] - crop + 1))
        batch = batch[:, :, r:r + crop, c:c + crop]
    return np.ascontiguousarray(batch)


def train_float(images: np.ndarray, lam: float, steps: int = 8000, seed: int = 0, *,
                config: LicConfig = LicConfig(), batch_size: int = 8, lr: float = 3e-3,
                log_every: int = 100, crop: Optional[int] = TRAIN_CROP,
                augment: bool = True) -> LicModel:
    """Train the float codec with the noise proxy on latents and Adam.

    With ``augment`` each batch is randomly flipped, transposed and cropped
    to ``crop`` pixels.  The training curve (step, mean J) is kept on the returned model.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] < 1:
        raise ValueError("images must be shaped (N, 1, H, W)")
    model = init_model(config, lam, seed)
    rng = np.random.default_rng(seed + 1)
    params = model.tensors(requires_grad=True)
    names = model.param_names()
    opt = ad.Adam([([params[k] for k in names], lr)])
    n = images.shape[0]
    order = rng.permutation(n)
    cursor = 0
    curve = []
    for step in range(steps):
        if step == int(steps * 0.8):
            opt.lrs = [lr * 0.1] * len(opt.lrs)
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + min(batch_size, n)]
        cursor += len(idx)
        batch = _augment(images[idx], rng, crop) if augment else images[idx]
        opt.zero_grad()
        res = forward_rd(model, batch, "noise", rng, params)
        loss = ad.mean(res.j)
        if not np.isfinite(loss.item()):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: bits={res.bits.data}, mse={res.mse.data}")
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            curve.append((step, loss.item()))
            log.info("train lam=%g step %d J=%.4f", lam, step, loss.item())
    model.params = {k: params[k].data.astype(np.float32) for k in names}
    model.steps = steps
    model.curve = curve
    return model


def evaluate_float(model: LicModel, images: np.ndarray) -> list[RdPoint]:
    with ad.no_grad():
        return forward_rd(model, images, "hard").points(model.lam)
