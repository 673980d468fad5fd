import numpy as np
import pytest

from dropin.tonemap import (
    RqSpline,
    ToneParams,
    apply_fg_tone,
    apply_shadow_tone,
    reinhard,
    srgb_decode,
    srgb_encode,
)


def test_reinhard_values():
    assert reinhard(0.0) == 0.0
    assert reinhard(1.0) == 0.5
    assert reinhard(3.0) == 0.75
    with pytest.raises(ValueError):
        reinhard(-0.1)


def test_spline_identity_init():
    sp = RqSpline()
    x = np.linspace(0, 1, 100)
    assert np.max(np.abs(sp.evaluate(x) - x)) <= 1e-6


def test_spline_endpoint_pins_random(rng):
    for _ in range(100):
        sp = RqSpline(rng.normal(0, 1.5, 14))
        assert abs(sp.evaluate(np.array(0.0))) < 1e-12
        assert abs(sp.evaluate(np.array(1.0)) - 1.0) < 1e-12


def test_spline_strict_monotonicity_random(rng):
    x = np.linspace(0, 1 - 1e-4, 300)
    for _ in range(100):
        sp = RqSpline(rng.normal(0, 1.5, 14))
        y0 = sp.evaluate(x)
        y1 = sp.evaluate(x + 1e-4)
        assert np.all(y1 > y0)


def test_spline_derivative_positive(rng):
    x = np.linspace(0.001, 0.999, 200)
    for _ in range(20):
        sp = RqSpline(rng.normal(0, 1.0, 14))
        assert np.all(sp.derivative(x) > 0)


def test_spline_bisection_inverse(rng):
    for _ in range(10):
        sp = RqSpline(rng.normal(0, 1.0, 14))
        x = rng.uniform(0, 1, 50)
        y = sp.evaluate(x)
        assert np.max(np.abs(sp.inverse(y) - x)) < 1e-6


def test_spline_rejects_wrong_param_count():
    with pytest.raises(ValueError):
        RqSpline(np.zeros(13))


def test_fg_tone_identity_is_reinhard(rng):
    img = rng.uniform(0, 4.0, (6, 7, 3))
    tone = ToneParams()
    assert np.allclose(apply_fg_tone(img, tone), reinhard(img), atol=1e-6)


def test_shadow_tone_identity_passthrough(rng):
    beta = rng.uniform(0, 1, (5, 4, 3))
    tone = ToneParams()
    assert np.allclose(apply_shadow_tone(beta, tone), beta, atol=1e-6)


def test_shadow_tone_unshadowed_pixel_pinned(rng):
    tone = ToneParams.from_raw(rng.normal(0, 1, 14), rng.normal(0, 1, 42))
    beta = np.ones((3, 3, 3))
    assert np.allclose(apply_shadow_tone(beta, tone), 1.0, atol=1e-12)


def test_shadow_tone_above_one_passthrough(rng):
    tone = ToneParams.from_raw(rng.normal(0, 1, 14), rng.normal(0, 1, 42))
    beta = np.full((2, 2, 3), 1.3)
    assert np.allclose(apply_shadow_tone(beta, tone), 1.3)


def test_tone_outputs_in_unit_interval(rng):
    tone = ToneParams.from_raw(rng.normal(0, 1.2, 14), rng.normal(0, 1.2, 42))
    img = rng.uniform(0, 50.0, (8, 8, 3))
    out = apply_fg_tone(img, tone)
    assert np.all(out >= 0) and np.all(out <= 1)
    beta = rng.uniform(0, 1, (8, 8, 3))
    outb = apply_shadow_tone(beta, tone)
    assert np.all(outb >= 0) and np.all(outb <= 1)


def test_srgb_codec_values():
    assert srgb_encode(np.array([0.0]))[0] == 0
    assert srgb_encode(np.array([1.0]))[0] == 255
    assert srgb_encode(np.array([0.5]))[0] == round(255 * 0.5 ** (1 / 2.2)) == 186


def test_srgb_round_trip_quantization():
    x = np.linspace(0, 1, 257)
    back = srgb_decode(srgb_encode(x)) ** (1 / 2.2)  # compare in encoded space
    enc = x ** (1 / 2.2)
    assert np.max(np.abs(back - enc)) <= 1.0 / 255.0 + 1e-9


def test_srgb_decode_uint8_shape(rng):
    img = (rng.random((4, 5, 3)) * 255).astype(np.uint8)
    lin = srgb_decode(img)
    assert lin.shape == (4, 5, 3)
    assert lin.min() >= 0 and lin.max() <= 1


def test_tone_params_raw_round_trip(rng):
    fg = rng.normal(0, 1, 14)
    sh = rng.normal(0, 1, 42)
    tone = ToneParams.from_raw(fg, sh)
    assert np.array_equal(tone.fg_raw(), fg)
    assert np.array_equal(tone.shadow_raw(), sh)
