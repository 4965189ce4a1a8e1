"""Real bitstreams for float and quantized codecs.

Latents are entropy coded with static tables discretized from the learned
entropy model, so reported rates are actual payload lengths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from . import entropycodec as ec
from . import licnet
from . import tensorad as ad
from .data import to_uint8
from .fixedpoint import round_half_away
from .licnet import LicModel, RdPoint
from .qmodel import QuantizedModel

# Tables cover every integer whose tail mass exceeds this; the rest escape.
TAIL_MASS = 2.0 ** -20
MAX_HALF_RANGE = 1023


def _support(cdf_fn, center: float = 0.0) -> tuple[int, int]:
    ks = np.arange(-MAX_HALF_RANGE, MAX_HALF_RANGE + 1) + int(round(center))
    upper = cdf_fn(ks + 0.5)
    lower = cdf_fn(ks - 0.5)
    inside = np.nonzero((upper > TAIL_MASS) & (lower < 1.0 - TAIL_MASS))[0]
    if inside.size == 0:
        return int(ks[MAX_HALF_RANGE]), int(ks[MAX_HALF_RANGE])
    return int(ks[inside[0]]), int(ks[inside[-1]])


def factorized_table(model: LicModel, prefix: str) -> ec.CdfTable:
    """One table row per channel of the factorized logistic mixture."""
    channels = model.params[f"{prefix}.logits"].shape[0]
    lo, hi = [], []
    for c in range(channels):
        a, b = _support(lambda v, c=c: licnet.mixture_cdf(model.params, prefix, c, v))
        lo.append(a)
        hi.append(b)
    return ec.build_cdf(lambda r, v: licnet.mixture_cdf(model.params, prefix, r, v), lo, hi)


def _logistic_cdf(scale: float):
    return lambda v: ad._sigmoid_np(np.asarray(v, dtype=np.float64) / scale)


def conditional_tables() -> ec.CdfTable:
    """One zero-mean logistic table per quantized log-scale level."""
    levels = licnet.scale_levels()
    lo, hi = [], []
    for lv in levels:
        a, b = _support(_logistic_cdf(math.exp(lv)))
        lo.append(a)
        hi.append(b)
    return ec.build_cdf(lambda r, v: _logistic_cdf(math.exp(levels[r]))(v), lo, hi)


def _channel_rows(shape) -> np.ndarray:
    c, h, w = shape
    return np.broadcast_to(np.arange(c)[:, None, None], (c, h, w)).ravel()


@dataclass
class CodedImage:
    stream: ec.Bitstream
    y_hat: np.ndarray
    z_hat: Optional[np.ndarray]
    scale_idx: Optional[np.ndarray]

    @property
    def payload_bits(self) -> int:
        return 8 * len(self.stream.payload)


class ImageCodec:
    """Encoder/decoder for one model, float or quantized."""

    def __init__(self, model: LicModel, qmodel: Optional[QuantizedModel] = None,
                 digest: bytes = bytes(8), lambda_index: Optional[int] = None):
        self.model = model
        self.qmodel = qmodel
        self.digest = digest
        if lambda_index is None:
            lambda_index = (licnet.LAMBDA_LADDER.index(model.lam)
                            if model.lam in licnet.LAMBDA_LADDER else 255)
        self.lambda_index = lambda_index

    @property
    def bit_width(self) -> int:
        return 0 if self.qmodel is None else int(self.qmodel.tag.get("w_bits", 8))

    @cached_property
    def main_table(self) -> ec.CdfTable:
        return factorized_table(self.model, "entropy_y")

    @cached_property
    def hyper_table(self) -> ec.CdfTable:
        return factorized_table(self.model, "entropy_z")

    @cached_property
    def scale_table(self) -> ec.CdfTable:
        return conditional_tables()

    # transforms -------------------------------------------------------------------
    def latents(self, pixels: np.ndarray):
        """8-bit pixels (N, 1, H, W) -> (y_hat, z_hat, scale index)."""
        pixels = np.asarray(pixels)
        if self.qmodel is not None:
            y_hat = self.qmodel.analyze(pixels)
        else:
            with ad.no_grad():
                y = licnet.analyze(self.model, pixels.astype(np.float32) / 255.0)
            y_hat = round_half_away(y.data).astype(np.int64)
        if not self.model.config.hyperprior:
            return y_hat, None, None
        z_hat, idx = self.hyper(y_hat)
        return y_hat, z_hat, idx

    def hyper(self, y_hat: np.ndarray):
        if self.qmodel is not None:
            z_hat = self.qmodel.hyper_analyze(y_hat)
            return z_hat, self.qmodel.hyper_scale_index(z_hat)
        z_hat = self.hyper_latent(y_hat)
        return z_hat, self.scale_index(z_hat)

    def hyper_latent(self, y_hat):
        with ad.no_grad():
            z = licnet.hyper_analyze(self.model, y_hat.astype(np.float32))
        return round_half_away(z.data).astype(np.int64)

    def scale_index(self, z_hat: np.ndarray) -> np.ndarray:
        if self.qmodel is not None:
            return self.qmodel.hyper_scale_index(z_hat)
        with ad.no_grad():
            ls = licnet.hyper_synthesize(self.model, z_hat.astype(np.float32))
        return licnet.scale_index(ls.data)

    def reconstruct(self, y_hat: np.ndarray) -> np.ndarray:
        if self.qmodel is not None:
            return self.qmodel.synthesize(y_hat)
        with ad.no_grad():
            x_hat = licnet.synthesize(self.model, y_hat.astype(np.float32))
        return to_uint8(x_hat.data)

    # rate -----------------------------------------------------------------------------
    def estimate_bits(self, y_hat: np.ndarray, z_hat=None, idx=None) -> np.ndarray:
        """Per-image model-estimated bits (the quantity the coder should hit)."""
        with ad.no_grad():
            if not self.model.config.hyperprior:
                return licnet.estimate_rate(self.model, y_hat.astype(np.float32)).data.astype(np.float64)
            log_scale = ad.Tensor(licnet.scale_levels()[idx].astype(np.float32))
            p_y = licnet.conditional_likelihood(ad.Tensor(y_hat.astype(np.float32)), log_scale)
            p_z = licnet.factorized_likelihood(ad.Tensor(z_hat.astype(np.float32)),
                                               self.model.tensors(), "entropy_z")
            bits = licnet.bits_from_likelihood(p_y) + licnet.bits_from_likelihood(p_z)
        return bits.data.astype(np.float64)

    # bitstreams -------------------------------------------------------------------------
    def _check_size(self, h: int, w: int):
        mult = 32 if self.model.config.hyperprior else 16
        if h % mult or w % mult or h == 0 or w == 0:
            raise ValueError(f"image sides must be positive multiples of {mult}")

    def encode(self, pixels: np.ndarray) -> CodedImage:
        """Code one 8-bit image shaped (H, W)."""
        pixels = np.asarray(pixels)
        if pixels.ndim != 2:
            raise ValueError("encode expects a single (H, W) image")
        h, w = pixels.shape
        self._check_size(h, w)
        y_hat, z_hat, idx = self.latents(pixels[None, None])
        enc = ec.RangeEncoder()
        if z_hat is not None:
            ec.encode_symbols(z_hat[0], self.hyper_table, _channel_rows(z_hat.shape[1:]), enc)
            ec.encode_symbols(y_hat[0], self.scale_table, idx[0], enc)
        else:
            ec.encode_symbols(y_hat[0], self.main_table, _channel_rows(y_hat.shape[1:]), enc)
        stream = ec.Bitstream(w, h, self.lambda_index, self.digest, self.bit_width, enc.finish())
        return CodedImage(stream, y_hat, z_hat, idx)

    def decode(self, stream: ec.Bitstream) -> np.ndarray:
        """Bitstream -> 8-bit image (H, W)."""
        if stream.model_digest != self.digest:
            raise ec.DecodeError("bitstream was produced by a different model")
        if stream.bit_width != self.bit_width:
            raise ec.DecodeError("bitstream bit width does not match the model")
        self._check_size(stream.height, stream.width)
        cfg = self.model.config
        y_shape = (1, cfg.latent, stream.height // 16, stream.width // 16)
        dec = ec.RangeDecoder(stream.payload)
        if cfg.hyperprior:
            z_shape = (1, cfg.hyper_channels, stream.height // 32, stream.width // 32)
            z_hat = ec.decode_symbols(dec, self.hyper_table, int(np.prod(z_shape)),
                                      _channel_rows(z_shape[1:])).reshape(z_shape)
            idx = self.scale_index(z_hat)
            y_hat = ec.decode_symbols(dec, self.scale_table, int(np.prod(y_shape)),
                                      idx[0]).reshape(y_shape)
        else:
            y_hat = ec.decode_symbols(dec, self.main_table, int(np.prod(y_shape)),
                                      _channel_rows(y_shape[1:])).reshape(y_shape)
        if dec.overrun() > 0:
            raise ec.DecodeError("decoder ran past the end of the payload")
        return self.reconstruct(y_hat)[0, 0]

    # evaluation ---------------------------------------------------------------------------
    def evaluate(self, images: np.ndarray) -> list["CodedResult"]:
        """Code every image (N, 1, H, W) in [0, 1]; actual bits, 8-bit reconstructions."""
        pixels = to_uint8(images)
        out = []
        for k in range(pixels.shape[0]):
            coded = self.encode(pixels[k, 0])
            recon = self.reconstruct(coded.y_hat)[0, 0]
            est = float(self.estimate_bits(coded.y_hat, coded.z_hat, coded.scale_idx)[0])
            mse = float(np.mean((recon.astype(np.float64) - pixels[k, 0].astype(np.float64)) ** 2))
            n_pix = pixels.shape[2] * pixels.shape[3]
            bpp = coded.payload_bits / n_pix
            point = RdPoint(bpp, mse, self.model.lam * mse + bpp)
            out.append(CodedResult(point, est, coded.payload_bits, recon))
        return out


@dataclass
class CodedResult:
    point: RdPoint
    estimated_bits: float
    actual_bits: int
    reconstruction: np.ndarray
