import numpy as np
import pytest

from errors import ImageMismatchError
from image_metrics import (Image, LossConfig, gaussian_window, l1, loss, loss_with_gradient, psnr, read_png, ssim,
                           ssim_with_gradient, write_png)


def random_image(rng, h=10, w=12):
    return Image(rng.uniform(0.05, 0.95, (h, w, 3)))


def slow_ssim(x, y, cfg):
    """Direct windowed sums over a zero-padded image"""
    size = cfg.ssim_window
    half = size // 2
    w = gaussian_window(size, cfg.ssim_sigma)
    c1, c2 = cfg.ssim_k1 ** 2, cfg.ssim_k2 ** 2
    h_, w_ = x.shape[:2]

    def blur(a):
        padded = np.zeros((h_ + 2 * half, w_ + 2 * half, a.shape[2]))
        padded[half:half + h_, half:half + w_] = a
        out = np.zeros_like(a)
        for u in range(size):
            for v in range(size):
                out += w[u] * w[v] * padded[u:u + h_, v:v + w_]
        return out

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx ** 2
    vy = blur(y * y) - my ** 2
    cxy = blur(x * y) - mx * my
    s = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return s.mean()


def test_image_shape_checked():
    with pytest.raises(ValueError):
        Image(np.zeros((4, 4)))
    black = Image.black(5, 3)
    assert (black.width, black.height) == (5, 3)


def test_psnr_cap_and_closed_form():
    a = Image.black(8, 8)
    assert psnr(a, a) == 100.0
    b = Image(np.full((8, 8, 3), 0.1))
    assert psnr(a, b) == pytest.approx(20.0)
    assert l1(a, b) == pytest.approx(0.1)


def test_mismatched_shapes_raise():
    with pytest.raises(ImageMismatchError):
        psnr(Image.black(4, 4), Image.black(4, 5))
    with pytest.raises(ImageMismatchError):
        ssim(Image.black(4, 4), Image.black(5, 4))


def test_ssim_identity_is_one(rng):
    image = random_image(rng)
    assert ssim(image, image) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_direct_windowed_sums(rng):
    x, y = random_image(rng), random_image(rng)
    cfg = LossConfig()
    assert ssim(x, y, cfg) == pytest.approx(slow_ssim(x.pixels, y.pixels, cfg), rel=1e-10)


def test_ssim_small_window(rng):
    x, y = random_image(rng, 6, 7), random_image(rng, 6, 7)
    cfg = LossConfig(ssim_window=3, ssim_sigma=0.8)
    assert ssim(x, y, cfg) == pytest.approx(slow_ssim(x.pixels, y.pixels, cfg), rel=1e-10)


def test_ssim_is_below_one_for_different_images(rng):
    assert ssim(random_image(rng), random_image(rng)) < 0.9


def finite_difference(f, x, coords, h=1e-6):
    grads = []
    for c in coords:
        plus, minus = x.copy(), x.copy()
        plus[c] += h
        minus[c] -= h
        grads.append((f(plus) - f(minus)) / (2 * h))
    return np.array(grads)


def sample_coords(rng, shape, count=25):
    return [tuple(int(rng.integers(0, s)) for s in shape) for _ in range(count)]


def test_ssim_gradient_matches_finite_differences(rng):
    x, y = random_image(rng).pixels, random_image(rng).pixels
    _, grad = ssim_with_gradient(x, y)
    coords = sample_coords(rng, x.shape)
    numeric = finite_difference(lambda p: ssim(p, y), x, coords)
    np.testing.assert_allclose([grad[c] for c in coords], numeric, rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize('lambda_l1', [0.8, 0.0, 1.0])
def test_loss_gradient_matches_finite_differences(rng, lambda_l1):
    cfg = LossConfig(lambda_l1=lambda_l1)
    x, y = random_image(rng).pixels, random_image(rng).pixels
    value, grad = loss_with_gradient(x, y, cfg)
    assert value == pytest.approx(loss(x, y, cfg))
    coords = sample_coords(rng, x.shape)
    numeric = finite_difference(lambda p: loss(p, y, cfg), x, coords)
    np.testing.assert_allclose([grad[c] for c in coords], numeric, rtol=1e-4, atol=1e-8)


def test_loss_of_identical_images_is_zero(rng):
    image = random_image(rng)
    assert loss(image, image) == pytest.approx(0.0, abs=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_l1=1.5)
    with pytest.raises(ValueError):
        LossConfig(ssim_window=4)


def test_png_round_trip(rng):
    image = random_image(rng, 7, 9)
    decoded = read_png(write_png(image))
    assert (decoded.width, decoded.height) == (9, 7)
    assert np.abs(decoded.pixels - image.pixels).max() <= 0.5 / 255 + 1e-12
    assert read_png(write_png(decoded)).equals(decoded)


def test_png_clamps_out_of_range():
    image = Image(np.stack([np.full((2, 2), -0.5), np.full((2, 2), 0.5), np.full((2, 2), 1.7)], axis=2))
    decoded = read_png(write_png(image))
    assert decoded.pixels[0, 0].tolist() == [0.0, 128 / 255, 1.0]
