"""RDOQ-M v1 model container.

Layout (little-endian): magic, version, architecture descriptor, lambda,
seed, steps, float32 tensors in declaration order, an optional quantized
section with one block per layer, and a key=value metadata trailer.
"""
from __future__ import annotations

import hashlib
import struct
from typing import Optional

import numpy as np

from . import fixedpoint as fp
from .licnet import LayerSpec, LicConfig, LicModel
from .qmodel import FrozenLayer, QuantizedModel

MAGIC = b"RDOQ-M\0"
VERSION = 1
KINDS = ("conv", "tconv")
BIAS_MODES = ("rescaled", "int32")


class ContainerError(ValueError):
    """Malformed or unsupported model file."""


def digest(data: bytes) -> bytes:
    """Truncated 64-bit hash identifying a model file."""
    return hashlib.blake2b(data, digest_size=8).digest()


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *vals):
        self.parts.append(struct.pack("<" + fmt, *vals))

    def text(self, s: str):
        raw = s.encode("utf-8")
        self.pack("H", len(raw))
        self.parts.append(raw)

    def array(self, arr: np.ndarray, dtype: str):
        arr = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<"))
        self.pack("B", arr.ndim)
        self.pack(f"{arr.ndim}I", *arr.shape)
        self.parts.append(arr.tobytes())

    def scale(self, s: fp.FixedScale):
        self.pack("BBB", int(s.per_channel), s.n_r, s.b_s)
        self.array(np.atleast_1d(np.asarray(s.raw, dtype=np.int64)).astype(np.uint32), "u4")

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        if self.pos + size > len(self.data):
            raise ContainerError("unexpected end of model file")
        vals = struct.unpack_from("<" + fmt, self.data, self.pos)
        self.pos += size
        return vals

    def text(self) -> str:
        (n,) = self.unpack("H")
        if self.pos + n > len(self.data):
            raise ContainerError("unexpected end of model file")
        s = self.data[self.pos:self.pos + n].decode("utf-8")
        self.pos += n
        return s

    def array(self, dtype: str) -> np.ndarray:
        (ndim,) = self.unpack("B")
        shape = self.unpack(f"{ndim}I") if ndim else ()
        dt = np.dtype(dtype).newbyteorder("<")
        size = int(np.prod(shape)) * dt.itemsize
        if self.pos + size > len(self.data):
            raise ContainerError("unexpected end of model file")
        arr = np.frombuffer(self.data, dtype=dt, count=int(np.prod(shape)), offset=self.pos)
        self.pos += size
        return arr.reshape(shape).astype(dt.newbyteorder("="))

    def scale(self) -> fp.FixedScale:
        per_channel, n_r, b_s = self.unpack("BBB")
        raw = self.array("u4").astype(np.int64)
        return fp.FixedScale(raw if per_channel else int(raw[0]), n_r, b_s)


def _write_qtensor(w: _Writer, q: fp.QTensor):
    w.pack("Bb", q.bit_width, -1 if q.axis is None else q.axis)
    w.scale(q.scale)
    w.array(q.zero_point, "i4")
    w.array(q.values.astype(np.uint16), "u2")


def _read_qtensor(r: _Reader) -> fp.QTensor:
    bits, axis = r.unpack("Bb")
    scale = r.scale()
    zero = r.array("i4").astype(np.int64)
    values = r.array("u2").astype(np.int64)
    return fp.QTensor(values, bits, scale, zero, None if axis < 0 else axis)


def _write_layer(w: _Writer, layer: FrozenLayer):
    w.text(layer.name)
    w.pack("B", layer.x_bits)
    w.scale(layer.x_scale)
    w.array(layer.x_zero, "i4")
    _write_qtensor(w, layer.weight)
    w.pack("B", BIAS_MODES.index(layer.bias_mode))
    w.array(layer.bias, "i4")
    w.scale(layer.bias_ref)
    w.pack("B", int(layer.bias_q is not None))
    if layer.bias_q is not None:
        _write_qtensor(w, layer.bias_q)
    w.array(np.asarray(layer.n_w, dtype=np.float64), "f8")
    w.array(np.asarray(layer.n_x, dtype=np.float64), "f8")
    w.pack("d", layer.n_b)


def _read_layer(r: _Reader) -> FrozenLayer:
    name = r.text()
    (x_bits,) = r.unpack("B")
    x_scale = r.scale()
    x_zero = r.array("i4").astype(np.int64)
    weight = _read_qtensor(r)
    (mode,) = r.unpack("B")
    if mode >= len(BIAS_MODES):
        raise ContainerError("unknown bias mode")
    bias = r.array("i4").astype(np.int64)
    bias_ref = r.scale()
    (has_bq,) = r.unpack("B")
    bias_q = _read_qtensor(r) if has_bq else None
    n_w = r.array("f8")
    n_x = r.array("f8")
    (n_b,) = r.unpack("d")
    return FrozenLayer(name, x_scale, x_zero, x_bits, weight, bias, bias_ref, BIAS_MODES[mode],
                       bias_q, n_w, n_x, n_b)


def save_model(model: LicModel, qmodel: Optional[QuantizedModel] = None,
               meta: Optional[dict] = None) -> bytes:
    w = _Writer()
    w.parts.append(MAGIC)
    w.pack("H", VERSION)
    cfg = model.config
    w.pack("HHBHB", cfg.channels, cfg.latent, int(cfg.hyperprior), cfg.hyper_channels, cfg.mixture)
    w.pack("H", len(model.layers))
    for spec in model.layers:
        w.text(spec.name)
        w.text(spec.transform)
        w.pack("BHHBBB", KINDS.index(spec.kind), spec.in_ch, spec.out_ch, spec.kernel,
               spec.stride, int(spec.relu))
    w.pack("dQI", model.lam, model.seed, model.steps)
    names = model.param_names()
    w.pack("H", len(names))
    for name in names:
        w.text(name)
        w.array(model.params[name], "f4")
    w.pack("B", int(qmodel is not None))
    if qmodel is not None:
        w.text(";".join(f"{k}={v}" for k, v in sorted(qmodel.tag.items())))
        for layer in qmodel.layers:
            _write_layer(w, layer)
    trailer = "".join(f"{k}={v}\n" for k, v in sorted((meta or {}).items()))
    raw = trailer.encode("utf-8")
    w.pack("I", len(raw))
    w.parts.append(raw)
    return w.bytes()


def _parse_tag(text: str) -> dict:
    tag = {}
    for item in filter(None, text.split(";")):
        key, _, value = item.partition("=")
        tag[key] = int(value) if value.lstrip("-").isdigit() else value
    return tag


def load_model(data: bytes) -> tuple[LicModel, Optional[QuantizedModel], dict]:
    """Parse a container; returns (float model, quantized model or None, metadata)."""
    if not data.startswith(MAGIC):
        raise ContainerError("not an RDOQ-M file")
    r = _Reader(data)
    r.pos = len(MAGIC)
    (version,) = r.unpack("H")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        channels, latent, hyper, hyper_ch, mixture = r.unpack("HHBHB")
        cfg = LicConfig(channels, latent, bool(hyper), hyper_ch, mixture)
        (n_layers,) = r.unpack("H")
        layers = []
        for _ in range(n_layers):
            name, transform = r.text(), r.text()
            kind, cin, cout, k, stride, relu = r.unpack("BHHBBB")
            layers.append(LayerSpec(name, transform, KINDS[kind], cin, cout, k, stride, bool(relu)))
        lam, seed, steps = r.unpack("dQI")
        (n_tensors,) = r.unpack("H")
        params = {}
        for _ in range(n_tensors):
            name = r.text()
            params[name] = r.array("f4").astype(np.float32)
        model = LicModel(cfg, params, lam, seed, steps, layers)
        if set(model.param_names()) != set(params):
            raise ContainerError("tensor list does not match the architecture")
        for spec in layers:
            if params[f"{spec.name}.weight"].shape != spec.weight_shape:
                raise ContainerError(f"weight shape mismatch for {spec.name}")
        (has_q,) = r.unpack("B")
        qmodel = None
        if has_q:
            tag = _parse_tag(r.text())
            frozen = [_read_layer(r) for _ in layers]
            qmodel = QuantizedModel(model, frozen, tag)
        (n_meta,) = r.unpack("I")
        if r.pos + n_meta != len(data):
            raise ContainerError("trailing bytes or truncated metadata")
        meta = {}
        for line in data[r.pos:].decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            meta[key] = value
    except (struct.error, IndexError, UnicodeDecodeError, fp.InvalidParameterError, ValueError) as exc:
        if isinstance(exc, ContainerError):
            raise
        raise ContainerError(f"malformed model file: {exc}") from exc
    return model, qmodel, meta
