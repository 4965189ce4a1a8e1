import numpy as np
import pytest

from rdoq import calib, container, licnet
from rdoq import entropycodec as ec
from rdoq.codec import ImageCodec
from rdoq.data import to_uint8


@pytest.fixture(scope="module")
def quantized(trained, calib_images):
    return calib.minmax_model(trained, calib_images, calib.CalibConfig())


@pytest.fixture(scope="module")
def codecs(trained, quantized):
    hyper = licnet.init_model(licnet.LicConfig(hyperprior=True), 0.0483, seed=5)
    return [ImageCodec(trained), ImageCodec(trained, quantized),
            ImageCodec(licnet.init_model(licnet.LicConfig(), 0.0018, seed=3)),
            ImageCodec(hyper), ImageCodec(licnet.init_model(licnet.LicConfig(), 0.013, seed=4))]


def test_payload_tracks_rate_estimate(codecs, desk):
    images = np.concatenate([desk.train, desk.test])
    rng = np.random.default_rng(0)
    pairs = 0
    for codec in codecs:
        for k in rng.choice(len(images), 10, replace=False):
            res = codec.evaluate(images[k:k + 1])[0]
            assert abs(res.actual_bits - res.estimated_bits) <= 0.02 * res.estimated_bits + 128
            pairs += 1
    assert pairs == 50


@pytest.mark.parametrize("which", [0, 1, 3])
def test_encode_decode_round_trip(codecs, desk, which):
    codec = codecs[which]
    pixels = to_uint8(desk.test[0, 0])
    coded = codec.encode(pixels)
    raw = coded.stream.to_bytes()
    assert codec.encode(pixels).stream.to_bytes() == raw
    decoded = codec.decode(ec.Bitstream.from_bytes(raw))
    assert np.array_equal(decoded, codec.reconstruct(coded.y_hat)[0, 0])
    assert decoded.shape == pixels.shape and decoded.dtype == np.uint8


def test_quantized_decode_is_integer_exact(codecs, desk):
    codec = codecs[1]
    pixels = to_uint8(desk.test[:2])
    y_int = codec.qmodel.analyze(pixels)
    y_sim = codec.qmodel.analyze(pixels, integer=False)
    assert np.max(np.abs(y_int - y_sim)) <= 1


def test_decoder_rejects_foreign_streams(trained, quantized, desk):
    pixels = to_uint8(desk.test[1, 0])
    stream = ImageCodec(trained, quantized, digest=b"AAAAAAAA").encode(pixels).stream
    with pytest.raises(ec.DecodeError):
        ImageCodec(trained, quantized, digest=b"BBBBBBBB").decode(stream)
    with pytest.raises(ec.DecodeError):
        ImageCodec(trained, digest=b"AAAAAAAA").decode(stream)


def test_encoder_rejects_bad_sizes(codecs):
    with pytest.raises(ValueError):
        codecs[0].encode(np.zeros((40, 64), dtype=np.uint8))
    with pytest.raises(ValueError):
        codecs[3].encode(np.zeros((48, 64), dtype=np.uint8))
    with pytest.raises(ValueError):
        codecs[0].encode(np.zeros((1, 64, 64), dtype=np.uint8))


def test_lambda_index_in_header(trained, desk):
    stream = ImageCodec(trained).encode(to_uint8(desk.test[0, 0])).stream
    assert stream.lambda_index == licnet.LAMBDA_LADDER.index(0.013)
    assert (stream.width, stream.height, stream.bit_width) == (64, 64, 0)


# model container ---------------------------------------------------------------------
def test_container_round_trip(trained, quantized):
    raw = container.save_model(trained, quantized, {"seed": 0, "note": "x"})
    model, q, meta = container.load_model(raw)
    for k in trained.params:
        assert np.array_equal(model.params[k], trained.params[k])
    assert (model.lam, model.seed, model.steps) == (trained.lam, trained.seed, trained.steps)
    assert q.layer_digests() == quantized.layer_digests()
    assert q.tag == quantized.tag
    assert meta == {"note": "x", "seed": "0"}
    assert container.save_model(model, q, {"seed": 0, "note": "x"}) == raw


def test_float_only_container(trained):
    model, q, meta = container.load_model(container.save_model(trained))
    assert q is None and meta == {}
    assert model.layers == trained.layers


def test_malformed_containers_raise(trained, quantized):
    raw = container.save_model(trained, quantized)
    with pytest.raises(container.ContainerError):
        container.load_model(b"JUNK" + raw[4:])
    with pytest.raises(container.ContainerError):
        container.load_model(raw[: len(raw) // 2])
    with pytest.raises(container.ContainerError):
        container.load_model(raw + b"\x00")
    bad_version = bytearray(raw)
    bad_version[len(container.MAGIC)] ^= 0xFF
    with pytest.raises(container.ContainerError):
        container.load_model(bytes(bad_version))


def test_container_digest_is_stable(trained):
    raw = container.save_model(trained)
    assert container.digest(raw) == container.digest(bytes(raw))
    assert len(container.digest(raw)) == 8
    assert container.digest(raw) != container.digest(raw + b"x")
