"""Unit tests for the convolutional head, saliency maps, noise
injection, and image I/O."""

import numpy as np
import pytest

from liquidlane.perception import (
    CONV_SPECS,
    FEATURE_SIZE,
    FRAME_HEIGHT,
    FRAME_WIDTH,
    add_gaussian_noise,
    conv_backward_batch,
    conv_forward,
    conv_forward_batch,
    conv_map_shapes,
    init_conv_head,
    lipschitz_bound,
    load_image_csv,
    load_image_png,
    save_image_csv,
    save_image_pgm,
    save_image_png,
    to_uint8,
    visual_backprop,
)

from oracles import reference_conv2d_relu, reference_visual_backprop

RNG = lambda seed=0: np.random.default_rng(seed)  # noqa: E731


def small_head(rng, in_height=12, in_width=20):
    return init_conv_head(rng, in_height=in_height, in_width=in_width,
                          specs=((3, 3, 2), (4, 3, 1)), feature_size=6)


# --- geometry ---------------------------------------------------------------


def test_default_map_chain():
    shapes = conv_map_shapes(FRAME_HEIGHT, FRAME_WIDTH, CONV_SPECS)
    assert shapes == [(22, 78), (9, 37), (4, 18)]
    assert [spec[0] for spec in CONV_SPECS] == [8, 16, 16]


def test_flatten_size():
    head = init_conv_head(RNG())
    assert head.w_out.shape == (4 * 18 * 16, FEATURE_SIZE)
    assert head.feature_size == FEATURE_SIZE


def test_init_ranges():
    head = init_conv_head(RNG(1))
    for layer in head.layers:
        fan_in = layer.w.shape[0] * layer.w.shape[1] * layer.w.shape[2]
        assert np.all(np.abs(layer.w) <= fan_in**-0.5)
        assert np.all(layer.b == 0.0)
    assert np.all(head.b_out == 0.0)


# --- forward oracle -----------------------------------------------------------


def test_forward_matches_direct_convolution():
    rng = RNG(2)
    head = small_head(rng)
    frame = rng.uniform(0, 1, (12, 20))
    feats, cache = conv_forward_batch(head, frame[None])
    x = frame[:, :, None]
    for layer in head.layers:
        x = reference_conv2d_relu(x, layer.w, layer.b, layer.stride)
    expected = x.reshape(-1) @ head.w_out + head.b_out
    np.testing.assert_allclose(feats[0], expected, rtol=1e-12, atol=1e-12)


def test_forward_single_matches_batch():
    rng = RNG(3)
    head = small_head(rng)
    frames = rng.uniform(0, 1, (4, 12, 20))
    batch, _ = conv_forward_batch(head, frames)
    for i in range(4):
        single = conv_forward(head, frames[i])
        np.testing.assert_allclose(single, batch[i], rtol=1e-12, atol=1e-12)


def test_forward_rejects_wrong_size():
    head = small_head(RNG())
    with pytest.raises(ValueError):
        conv_forward_batch(head, np.zeros((1, 10, 20)))


# --- backward oracle -----------------------------------------------------------


def test_backward_matches_finite_differences():
    rng = RNG(4)
    head = small_head(rng, in_height=10, in_width=12)
    frames = rng.uniform(0, 1, (2, 10, 12))
    dout = rng.normal(size=(2, head.feature_size))

    def objective():
        feats, _ = conv_forward_batch(head, frames)
        return float((feats * dout).sum())

    feats, cache = conv_forward_batch(head, frames)
    grads, dframes = conv_backward_batch(head, cache, dout)
    step = 1e-6
    for name, arr in head.arrays().items():
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        for idx in range(0, flat.size, max(1, flat.size // 11)):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = objective()
            flat[idx] = orig - step
            lo = objective()
            flat[idx] = orig
            fd = (hi - lo) / (2 * step)
            assert abs(fd - g[idx]) <= 1e-4 * max(1.0, abs(fd)), (name, idx)
    # input gradient
    flat = frames.reshape(-1)
    dflat = dframes.reshape(-1)
    for idx in range(0, flat.size, flat.size // 13):
        orig = flat[idx]
        flat[idx] = orig + step
        hi = objective()
        flat[idx] = orig - step
        lo = objective()
        flat[idx] = orig
        fd = (hi - lo) / (2 * step)
        assert abs(fd - dflat[idx]) <= 1e-4 * max(1.0, abs(fd)), idx


def test_relu_blocks_gradient():
    rng = RNG(5)
    head = small_head(rng)
    head.layers[0].b[:] = -100.0  # first layer saturates at zero
    frames = rng.uniform(0, 1, (1, 12, 20))
    feats, cache = conv_forward_batch(head, frames)
    grads, dframes = conv_backward_batch(head, cache, np.ones_like(feats))
    np.testing.assert_array_equal(dframes, 0.0)
    np.testing.assert_array_equal(grads["conv0.w"], 0.0)


def test_lipschitz_bound_scales():
    head = small_head(RNG(6))
    base = lipschitz_bound(head)
    assert base > 0
    head.w_out *= 3.0
    np.testing.assert_allclose(lipschitz_bound(head), 3.0 * base, rtol=1e-12)


# --- saliency -------------------------------------------------------------------


def test_visual_backprop_manual_trace():
    shallow = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
    deep = np.array([[[2.0, 0.0], [1.0, 3.0]]])
    result = visual_backprop([shallow, deep], input_shape=(4, 4))
    expected = reference_visual_backprop([shallow, deep], (4, 4))
    np.testing.assert_allclose(result, expected, rtol=1e-12, atol=1e-15)


def test_visual_backprop_range_and_shape():
    rng = RNG(7)
    maps = [rng.uniform(0, 1, (8, 24, 80)), rng.uniform(0, 1, (16, 10, 38)),
            rng.uniform(0, 1, (16, 4, 18))]
    sal = visual_backprop(maps, input_shape=(48, 160))
    assert sal.shape == (48, 160)
    assert sal.min() == 0.0 and sal.max() == 1.0


def test_visual_backprop_scale_invariant():
    rng = RNG(8)
    maps = [rng.uniform(0, 1, (4, 8, 8)), rng.uniform(0, 1, (6, 4, 4))]
    base = visual_backprop(maps, input_shape=(8, 8))
    scaled = visual_backprop([maps[0] * 5.0, maps[1] * 0.25], input_shape=(8, 8))
    np.testing.assert_allclose(scaled, base, rtol=1e-12, atol=1e-12)


def test_visual_backprop_constant_is_zero():
    maps = [np.ones((3, 6, 6)), np.ones((2, 3, 3))]
    sal = visual_backprop(maps, input_shape=(6, 6))
    np.testing.assert_array_equal(sal, 0.0)


def test_head_map_shapes_channel_first():
    rng = RNG(9)
    head = init_conv_head(rng)
    frame = rng.uniform(0, 1, (FRAME_HEIGHT, FRAME_WIDTH))
    _, maps = conv_forward(head, frame, keep_maps=True)
    assert [m.shape for m in maps] == [(8, 22, 78), (16, 9, 37), (16, 4, 18)]
    sal = visual_backprop(maps)
    assert sal.shape == (FRAME_HEIGHT, FRAME_WIDTH)


# --- noise ------------------------------------------------------------------------


def test_noise_deterministic_per_seed():
    frame = RNG(10).uniform(0, 1, (48, 160))
    a = add_gaussian_noise(frame, 0.1, seed=5)
    b = add_gaussian_noise(frame, 0.1, seed=5)
    c = add_gaussian_noise(frame, 0.1, seed=6)
    np.testing.assert_array_equal(a, b)
    assert np.any(a != c)


def test_noise_clips_to_unit_range():
    frame = RNG(11).uniform(0, 1, (20, 20))
    noisy = add_gaussian_noise(frame, 4.0, seed=0)
    assert noisy.min() >= 0.0 and noisy.max() <= 1.0


def test_noise_zero_variance_is_copy():
    frame = RNG(12).uniform(0, 1, (8, 8))
    out = add_gaussian_noise(frame, 0.0, seed=0)
    np.testing.assert_array_equal(out, frame)
    assert out is not frame


def test_noise_negative_variance_rejected():
    with pytest.raises(ValueError):
        add_gaussian_noise(np.zeros((4, 4)), -0.1, seed=0)


def test_noise_scales_with_sqrt_variance():
    frame = np.full((64, 64), 0.5)
    # variances small enough that nothing clips
    a = add_gaussian_noise(frame, 1e-4, seed=3)
    b = add_gaussian_noise(frame, 4e-4, seed=3)
    # same standard-normal draw, scaled by sqrt(variance)
    np.testing.assert_allclose(b - 0.5, 2.0 * (a - 0.5), rtol=1e-10, atol=1e-12)


# --- image I/O -----------------------------------------------------------------------


def test_to_uint8_rounds():
    img = np.array([[0.0, 0.5, 1.0], [0.002, 0.998, 0.25]])
    out = to_uint8(img)
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out, [[0, 128, 255], [1, 254, 64]])


def test_png_round_trip(tmp_path):
    img = RNG(13).uniform(0, 1, (48, 160))
    path = tmp_path / "frame.png"
    save_image_png(img, path)
    back = load_image_png(path)
    np.testing.assert_array_equal(to_uint8(img), to_uint8(back))


def test_csv_round_trip_exact(tmp_path):
    img = RNG(14).uniform(0, 1, (6, 9))
    path = tmp_path / "frame.csv"
    save_image_csv(img, path)
    back = load_image_csv(path)
    np.testing.assert_array_equal(img, back)


def test_pgm_written(tmp_path):
    img = RNG(15).uniform(0, 1, (4, 5))
    path = tmp_path / "frame.pgm"
    save_image_pgm(img, path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n5 4\n255\n")
    assert len(raw) == len(b"P5\n5 4\n255\n") + 20
