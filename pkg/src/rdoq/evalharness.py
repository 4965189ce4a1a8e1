"""Metrics, rate-distortion curves, BD-rate and ablation runners."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .calib import CalibConfig, calibrate_model, minmax_model, mse_ptq
from .codec import ImageCodec
from .licnet import LicModel
from .qmodel import QuantizedModel

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
ABLATIONS = ("init", "granularity", "bias", "calibsize", "bitwidth")
CSV_HEADER = ("variant", "lambda", "bpp", "psnr_db", "j", "wall_s")


class BdRateError(ValueError):
    """Curves unsuitable for a Bjontegaard comparison."""


def psnr_from_mse(mse255: float) -> float:
    if mse255 <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse255))


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """PSNR in dB of two images on the [0, 1] scale; identical images give 100."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return psnr_from_mse(float(np.mean(((x - x_hat) * 255.0) ** 2)))


@dataclass
class CurvePoint:
    lam: float
    bpp: float
    psnr_db: float
    j: float
    estimated_bpp: float = math.nan


@dataclass
class RdCurve:
    """One R-D point per λ, kept sorted by rate."""

    points: list
    model_id: str = ""
    bit_width: int = 0

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p.psnr_db for p in self.points])

    def by_lambda(self, lam: float) -> CurvePoint:
        for p in self.points:
            if p.lam == lam:
                return p
        raise KeyError(lam)


def _integral(coeffs: np.ndarray, lo: float, hi: float) -> float:
    anti = np.polyint(coeffs)
    return float(np.polyval(anti, hi) - np.polyval(anti, lo))


def bd_rate(anchor: RdCurve, test: RdCurve) -> float:
    """Average bitrate difference of ``test`` vs ``anchor`` at equal PSNR, in percent.

    log-rate is fitted as a polynomial in PSNR (cubic, or lower when a curve
    has fewer than four points) and integrated over the shared PSNR range.
    """
    for c in (anchor, test):
        if len(c.points) < 3:
            raise BdRateError("BD-rate needs at least three points per curve")
        if np.any(c.bpp <= 0):
            raise BdRateError("rates must be positive")
    lo = max(anchor.psnr.min(), test.psnr.min())
    hi = min(anchor.psnr.max(), test.psnr.max())
    if not hi > lo:
        raise BdRateError("curves share no PSNR range")
    diffs = []
    for c in (anchor, test):
        deg = min(3, len(c.points) - 1)
        coeffs = np.polyfit(c.psnr, np.log(c.bpp), deg)
        diffs.append(_integral(coeffs, lo, hi) / (hi - lo))
    return float((math.exp(diffs[1] - diffs[0]) - 1.0) * 100.0)


# toy non-monotonicity demo -------------------------------------------------------
TOY_CASES = ((0.4, -0.4), (0.3, 0.3))


def toy_delta_j(dx: float, dw: float) -> float:
    """Second-order loss change of the two-parameter toy with Hessian [[1, .5], [.5, 1]]."""
    return 0.5 * (dx * dx + dx * dw + dw * dw)


@dataclass
class HessianDemo:
    cases: list  # (dx, dw, error_norm, delta_j)

    @property
    def inverted(self) -> bool:
        """True when the larger quantization error gives the smaller loss change."""
        (_, _, e0, j0), (_, _, e1, j1) = self.cases
        return (e0 > e1) and (j0 < j1)

    def to_text(self) -> str:
        lines = [f"dx={dx:+.1f} dw={dw:+.1f} |err|^2={e:.2f} dJ={j:.3f}" for dx, dw, e, j in self.cases]
        lines.append("larger error gives smaller loss: " + ("yes" if self.inverted else "no"))
        return "\n".join(lines)


def hessian_toy_demo() -> HessianDemo:
    cases = [(dx, dw, dx * dx + dw * dw, toy_delta_j(dx, dw)) for dx, dw in TOY_CASES]
    demo = HessianDemo(cases)
    if not demo.inverted:
        raise AssertionError("toy example failed to show the inversion")
    return demo


# curves ---------------------------------------------------------------------------
def rd_point(codec: ImageCodec, images: np.ndarray) -> CurvePoint:
    """Per-image PSNR / bpp / J from real bitstreams, averaged."""
    results = codec.evaluate(images)
    n_pix = images.shape[2] * images.shape[3]
    bpp = float(np.mean([r.point.bpp for r in results]))
    est = float(np.mean([r.estimated_bits for r in results])) / n_pix
    for r in results:
        gap = abs(r.actual_bits - r.estimated_bits)
        if gap > 0.02 * r.estimated_bits + 128:
            log.warning("rate estimate off by %.0f bits", gap)
    return CurvePoint(codec.model.lam, bpp,
                      float(np.mean([psnr_from_mse(r.point.distortion) for r in results])),
                      float(np.mean([r.point.j for r in results])), est)


def rd_curve(models: Sequence[LicModel], images: np.ndarray,
             qmodels: Optional[Sequence[Optional[QuantizedModel]]] = None,
             model_id: str = "") -> RdCurve:
    """One point per trained model (one model per λ)."""
    if qmodels is None:
        qmodels = [None] * len(models)
    points = [rd_point(ImageCodec(m, q), images) for m, q in zip(models, qmodels)]
    bits = 0 if qmodels[0] is None else int(qmodels[0].tag.get("w_bits", 8))
    return RdCurve(points, model_id, bits)


# ablations ------------------------------------------------------------------------
Quantizer = Callable[[LicModel, np.ndarray], QuantizedModel]


def _rdo(config: CalibConfig) -> Quantizer:
    return lambda m, imgs: calibrate_model(m, imgs, config)[0]


def ablation_variants(name: str, base: CalibConfig) -> list[tuple[str, Quantizer, Optional[int]]]:
    """(variant, quantizer, calibration size override) for one ablation."""
    if name == "init":
        out = []
        for init in ("minmax", "gridsearch"):
            cfg = replace(base, init=init)
            out.append((f"{init}-noopt", _rdo(replace(cfg, steps=0, rounding="nearest")), None))
            out.append((f"{init}-opt", _rdo(cfg), None))
        return out
    if name == "granularity":
        return [(g, _rdo(replace(base, granularity=g)), None) for g in ("channel", "layer")]
    if name == "bias":
        return [(b, _rdo(replace(base, bias=b)), None) for b in ("rescaled", "int32")]
    if name == "calibsize":
        return [(f"calib{n}", _rdo(replace(base, calib_size=n)), n) for n in (1, 2, 5, 10, 20)]
    if name == "bitwidth":
        return [(f"{b}bit", _rdo(base.with_bits(b)), None) for b in (6, 8, 10)]
    if name == "baselines":
        return [("minmax", lambda m, imgs: minmax_model(m, imgs, base), None),
                ("mse", lambda m, imgs: mse_ptq(m, imgs, base), None),
                ("rdo", _rdo(base), None)]
    raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")


@dataclass
class AblationResult:
    name: str
    float_curve: RdCurve
    curves: dict = field(default_factory=dict)  # variant -> RdCurve
    wall: dict = field(default_factory=dict)  # (variant, lambda) -> seconds

    def bd_loss(self, variant: str) -> float:
        return bd_rate(self.float_curve, self.curves[variant])

    def rows(self) -> list[tuple]:
        out = [("float", p.lam, p.bpp, p.psnr_db, p.j, 0.0)
               for p in sorted(self.float_curve.points, key=lambda p: p.lam)]
        for variant, curve in self.curves.items():
            for p in sorted(curve.points, key=lambda p: p.lam):
                out.append((variant, p.lam, p.bpp, p.psnr_db, p.j, self.wall[(variant, p.lam)]))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for v, lam, bpp, ps, j, wall in self.rows():
                w.writerow([v, f"{lam:g}", f"{bpp:.6f}", f"{ps:.4f}", f"{j:.6f}", f"{wall:.2f}"])


def calibration_subset(pool: np.ndarray, size: int, seed: int = 0) -> np.ndarray:
    if not 1 <= size <= len(pool):
        raise ValueError(f"calibration size must be in [1, {len(pool)}]")
    idx = np.sort(np.random.default_rng(seed).permutation(len(pool))[:size])
    return pool[idx]


def run_ablation(name: str, models: Sequence[LicModel], calib_pool: np.ndarray, test: np.ndarray,
                 base: Optional[CalibConfig] = None, out_path=None,
                 float_curve: Optional[RdCurve] = None) -> AblationResult:
    """Quantize every model under each variant of ``name`` and evaluate on ``test``.

    Calibration images are drawn from ``calib_pool`` with the config seed; the
    pool must not overlap ``test``.
    """
    base = base or CalibConfig()
    if float_curve is None:
        float_curve = rd_curve(models, test, model_id="float")
    result = AblationResult(name, float_curve)
    for variant, quantize, size in ablation_variants(name, base):
        calib = calibration_subset(calib_pool, size or base.calib_size, base.seed)
        qmodels = []
        for m in models:
            t0 = time.perf_counter()
            qmodels.append(quantize(m, calib))
            result.wall[(variant, m.lam)] = time.perf_counter() - t0
        result.curves[variant] = rd_curve(models, test, qmodels, variant)
        log.info("%s/%s done", name, variant)
    if out_path is not None:
        result.write_csv(out_path)
    return result
