import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdoq import evalharness as eh
from rdoq.calib import CalibConfig
from rdoq.evalharness import CurvePoint, RdCurve


def curve(rates, psnrs, lams=None):
    lams = lams or list(range(len(rates)))
    return RdCurve([CurvePoint(l, r, p, 0.0) for l, r, p in zip(lams, rates, psnrs)])


# psnr ------------------------------------------------------------------------------
def test_psnr_examples():
    x = np.random.default_rng(0).uniform(0, 1, (8, 8))
    assert eh.psnr(x, x) == 100.0
    assert eh.psnr_from_mse(65.025) == pytest.approx(30.0)
    assert eh.psnr_from_mse(650.25) == pytest.approx(20.0)
    x = np.zeros((4, 4))
    assert eh.psnr(x, x + math.sqrt(65.025) / 255) == pytest.approx(30.0)


def test_psnr_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        eh.psnr(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=50)
@given(st.floats(1e-4, 0.05), st.floats(1.05, 3.0), st.integers(0, 2 ** 16))
def test_psnr_decreases_with_noise_variance(sigma, factor, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (16, 16))
    n = rng.normal(size=x.shape)
    assert eh.psnr(x, x + sigma * factor * n) < eh.psnr(x, x + sigma * n)


# bd_rate ---------------------------------------------------------------------------
ANCHOR = ([0.1, 0.2, 0.4, 0.8], [28.0, 30.5, 33.0, 35.2])


def test_bd_rate_identity_is_zero():
    c = curve(*ANCHOR)
    assert eh.bd_rate(c, c) == pytest.approx(0.0, abs=1e-9)


def test_bd_rate_scaled_rates():
    a = curve(*ANCHOR)
    b = curve([r * 1.10 for r in ANCHOR[0]], ANCHOR[1])
    assert eh.bd_rate(a, b) == pytest.approx(10.0, abs=0.1)
    three = curve(ANCHOR[0][:3], ANCHOR[1][:3])
    three_b = curve([r * 1.10 for r in ANCHOR[0][:3]], ANCHOR[1][:3])
    assert eh.bd_rate(three, three_b) == pytest.approx(10.0, abs=0.1)


def _oracle_bd(f_a, f_b, lo, hi):
    """Dense trapezoid integration of the generating log-rate functions."""
    q = np.linspace(lo, hi, 20001)
    avg = lambda f: np.trapezoid(f(q), q) / (hi - lo)
    return (math.exp(avg(f_b) - avg(f_a)) - 1) * 100


def test_bd_rate_matches_integration_oracle():
    f_a = lambda q: -3.0 + 0.25 * (q - 28) + 0.004 * (q - 28) ** 2
    f_b = lambda q: -2.9 + 0.22 * (q - 28) + 0.006 * (q - 28) ** 2 - 1e-4 * (q - 28) ** 3
    qa = np.array([27.0, 29.5, 32.0, 35.0])
    qb = np.array([28.0, 30.0, 33.0, 36.0])
    a = curve(list(np.exp(f_a(qa))), list(qa))
    b = curve(list(np.exp(f_b(qb))), list(qb))
    assert eh.bd_rate(a, b) == pytest.approx(_oracle_bd(f_a, f_b, 28.0, 35.0), abs=1e-6)


@settings(max_examples=60)
@given(st.floats(-0.3, 0.3), st.floats(0.15, 0.35), st.floats(-0.5, 0.5))
def test_bd_rate_antisymmetry(shift, slope, dq):
    q = np.array([26.0, 29.0, 32.0, 35.0])
    a = curve(list(np.exp(-3 + 0.25 * (q - 26))), list(q))
    b = curve(list(np.exp(-3 + shift + slope * (q + dq - 26))), list(q + dq))
    ab, ba = eh.bd_rate(a, b) / 100, eh.bd_rate(b, a) / 100
    assert ab == pytest.approx(-ba / (1 + ba), abs=1e-6)


def test_bd_rate_errors():
    a = curve(*ANCHOR)
    with pytest.raises(eh.BdRateError):
        eh.bd_rate(a, curve([0.3], [31.0]))
    with pytest.raises(eh.BdRateError):
        eh.bd_rate(a, curve([0.1, 0.2, 0.3], [40.0, 41.0, 42.0]))
    with pytest.raises(eh.BdRateError):
        eh.bd_rate(a, curve([0.0, 0.2, 0.3], ANCHOR[1][:3]))


def test_curve_sorted_by_rate():
    c = curve([0.4, 0.1, 0.2], [33.0, 28.0, 30.0], lams=[3, 1, 2])
    assert list(c.bpp) == [0.1, 0.2, 0.4]
    assert c.by_lambda(2).psnr_db == 30.0
    with pytest.raises(KeyError):
        c.by_lambda(9)


# toy demo ---------------------------------------------------------------------------
def test_hessian_demo_values():
    demo = eh.hessian_toy_demo()
    (_, _, e0, j0), (_, _, e1, j1) = demo.cases
    assert abs(j0 - 0.08) <= 1e-12 and abs(j1 - 0.135) <= 1e-12
    assert e0 == pytest.approx(0.32) and e1 == pytest.approx(0.18)
    assert demo.inverted
    assert eh.toy_delta_j(0.0, 0.0) == 0.0
    assert "yes" in demo.to_text()


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_toy_hessian_is_positive_semidefinite(dx, dw):
    assert eh.toy_delta_j(dx, dw) >= 0


# ablation plumbing ------------------------------------------------------------------
def test_ablation_variants_cover_required_grid():
    base = CalibConfig()
    names = lambda n: [v for v, _, _ in eh.ablation_variants(n, base)]
    assert names("init") == ["minmax-noopt", "minmax-opt", "gridsearch-noopt", "gridsearch-opt"]
    assert names("granularity") == ["channel", "layer"]
    assert names("bias") == ["rescaled", "int32"]
    assert names("calibsize") == ["calib1", "calib2", "calib5", "calib10", "calib20"]
    assert names("bitwidth") == ["6bit", "8bit", "10bit"]
    with pytest.raises(ValueError):
        eh.ablation_variants("nope", base)


def test_calibration_subset_is_seeded():
    pool = np.arange(20).reshape(20, 1, 1, 1)
    a = eh.calibration_subset(pool, 5, seed=3)
    assert np.array_equal(a, eh.calibration_subset(pool, 5, seed=3))
    assert len(np.unique(a)) == 5
    with pytest.raises(ValueError):
        eh.calibration_subset(pool, 21)


def test_ablation_csv_layout(tmp_path):
    fc = curve([0.1, 0.2, 0.4], [28.0, 30.0, 32.0], lams=[0.0018, 0.013, 0.0483])
    res = eh.AblationResult("bitwidth", fc)
    res.curves["8bit"] = curve([0.11, 0.21, 0.41], [27.9, 29.9, 31.8], lams=[0.0018, 0.013, 0.0483])
    for lam in (0.0018, 0.013, 0.0483):
        res.wall[("8bit", lam)] = 1.5
    path = tmp_path / "a.csv"
    res.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == eh.CSV_HEADER
    assert len(rows) == 7 and rows[1][0] == "float" and rows[4][0] == "8bit"
    assert res.bd_loss("8bit") > 0


def test_rd_curve_single_point_rejected_by_bd_rate():
    from rdoq import licnet
    m = licnet.init_model(licnet.LicConfig(), 0.013, seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (1, 1, 32, 32)).astype(np.float32)
    c = eh.rd_curve([m], x)
    assert len(c.points) == 1 and c.bit_width == 0
    with pytest.raises(eh.BdRateError):
        eh.bd_rate(c, c)
