import numpy as np
import pytest

from rdoq import calib, licnet
from rdoq.qmodel import quantize_to_grid


@pytest.fixture(scope="module", params=[6, 8, 10])
def qmodel(request, trained, calib_images):
    return calib.minmax_model(trained, calib_images, calib.CalibConfig().with_bits(request.param))


def test_integer_and_simulated_layers_agree(qmodel, desk):
    """Fed the same integer input, every layer's two paths differ by at most one LSB."""
    x = desk.test[:2].astype(np.float64)
    for transform in ("g_a", "g_s"):
        idx = qmodel.float_model.transform_layers(transform)
        if transform == "g_s":
            x = qmodel.analyze(np.round(desk.test[:2] * 255.0)).astype(np.float64)
        q = quantize_to_grid(x, qmodel.layers[idx[0]].input_grid)
        for i in idx:
            a = qmodel.integer_layer(i, q)
            b = qmodel.simulate_layer(i, q)
            assert np.max(np.abs(a.values.astype(np.int64) - b.values.astype(np.int64))) <= 1
            q = a


def test_quantized_reconstruction_tracks_float(qmodel, trained, desk):
    pixels = np.round(desk.test[:2] * 255.0)
    y = qmodel.analyze(pixels)
    rec = qmodel.synthesize(y).astype(np.float64)
    mse = np.mean((rec - pixels) ** 2)
    assert rec.shape == pixels.shape
    assert 10 * np.log10(255.0 ** 2 / mse) > 15.0


def test_layer_digests_are_stable(qmodel):
    assert qmodel.layer_digests() == qmodel.layer_digests()
    assert len(set(qmodel.layer_digests())) == len(qmodel.layers)


def test_output_grids(qmodel):
    model = qmodel.float_model
    last_ga = model.transform_layers("g_a")[-1]
    assert float(np.asarray(qmodel.output_grid(last_ga).scale.value).ravel()[0]) == 1.0
    last_gs = model.transform_layers("g_s")[-1]
    assert qmodel.output_grid(last_gs).bits == 8
    first = model.transform_layers("g_a")[0]
    assert qmodel.output_grid(first) == qmodel.layers[first + 1].input_grid


def test_needs_one_layer_per_model_layer(trained, qmodel):
    from rdoq.qmodel import QuantizedModel
    with pytest.raises(ValueError):
        QuantizedModel(trained, qmodel.layers[:-1])
