"""
Image Metrics
RGB images, 8-bit PNG I/O, PSNR, Gaussian-window SSIM and the
L1 + structural training loss with gradients
"""

import io
import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import correlate1d

from errors import ImageMismatchError

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
PSNR_MSE_FLOOR = 1e-10


class Image:
    """
    Row-major RGB image with values in [0, 1]

    Args:
        pixels: (height, width, 3) array
    """

    def __init__(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected (height, width, 3) pixels, got {pixels.shape}")
        self.pixels = pixels

    @classmethod
    def black(cls, width, height):
        return cls(np.zeros((height, width, 3)))

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    def __repr__(self):
        return f"Image({self.width}x{self.height})"

    def clamped(self):
        return Image(np.clip(self.pixels, 0.0, 1.0))

    def equals(self, other):
        return np.array_equal(self.pixels, other.pixels)


def read_png(data):
    """Decode PNG bytes into an Image, 8-bit values mapped linearly to [0, 1]"""
    with PILImage.open(io.BytesIO(data)) as png:
        pixels = np.asarray(png.convert('RGB'), dtype=np.float64) / 255.0
    return Image(pixels)


def write_png(image):
    """Encode an Image as 8-bit RGB PNG bytes"""
    values = np.round(np.clip(image.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    buffer = io.BytesIO()
    PILImage.fromarray(values).save(buffer, format='PNG')
    return buffer.getvalue()


@dataclass
class LossConfig:
    lambda_l1: float = 0.8
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03

    def __post_init__(self):
        if not 0 <= self.lambda_l1 <= 1:
            raise ValueError(f"lambda_l1 must be in [0, 1], got {self.lambda_l1}")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be a positive odd integer")


def _pixels(image):
    return image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ImageMismatchError(f"image shapes differ: {a.shape[1]}x{a.shape[0]} vs {b.shape[1]}x{b.shape[0]}")


def gaussian_window(size, sigma):
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2
    window = np.exp(-offsets ** 2 / (2 * sigma ** 2))
    return window / window.sum()


def _blur(x, window):
    # zero-padded separable filtering over rows and columns, channels independent
    out = correlate1d(x, window, axis=0, mode='constant', cval=0.0)
    return correlate1d(out, window, axis=1, mode='constant', cval=0.0)


def l1(a, b):
    a, b = _pixels(a), _pixels(b)
    _check_same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b):
    """
    Peak signal-to-noise ratio for unit peak

    Args:
        a: Image
        b: Image

    Returns:
        10 log10(1 / MSE), capped at 100 when MSE < 1e-10
    """
    a, b = _pixels(a), _pixels(b)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim_with_gradient(x, y, cfg=None, with_gradient=True):
    """
    Mean local SSIM of x against y and its gradient with respect to x

    Args:
        x: Image (or pixel array) being optimised
        y: Reference image
        cfg: LossConfig (window, sigma, k1, k2)
        with_gradient: Skip the gradient when False

    Returns:
        (ssim, gradient array shaped like x or None)
    """
    cfg = cfg or LossConfig()
    x, y = _pixels(x), _pixels(y)
    _check_same_shape(x, y)

    window = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    c1 = cfg.ssim_k1 ** 2
    c2 = cfg.ssim_k2 ** 2

    mu_x, mu_y = _blur(x, window), _blur(y, window)
    e_xx, e_yy, e_xy = _blur(x * x, window), _blur(y * y, window), _blur(x * y, window)
    var_x = e_xx - mu_x ** 2
    var_y = e_yy - mu_y ** 2
    cov_xy = e_xy - mu_x * mu_y

    a1 = 2 * mu_x * mu_y + c1
    a2 = 2 * cov_xy + c2
    b1 = mu_x ** 2 + mu_y ** 2 + c1
    b2 = var_x + var_y + c2
    s = (a1 * a2) / (b1 * b2)
    value = float(s.mean())
    if not with_gradient:
        return value, None

    scale = 1.0 / s.size
    d_mu_x = s * (2 * mu_y / a1 - 2 * mu_y / a2 - 2 * mu_x / b1 + 2 * mu_x / b2) * scale
    d_e_xx = -s / b2 * scale
    d_e_xy = 2 * s / a2 * scale

    # the window is symmetric, so the blur is its own adjoint
    gradient = _blur(d_mu_x, window) + 2 * x * _blur(d_e_xx, window) + y * _blur(d_e_xy, window)
    return value, gradient


def ssim(a, b, cfg=None):
    return ssim_with_gradient(a, b, cfg, with_gradient=False)[0]


def loss_with_gradient(rendered, truth, cfg=None, with_gradient=True):
    """
    lambda * L1 + (1 - lambda) * (1 - SSIM)

    Args:
        rendered: Image
        truth: Image
        cfg: LossConfig

    Returns:
        (loss, gradient with respect to the rendered pixels or None)
    """
    cfg = cfg or LossConfig()
    x, y = _pixels(rendered), _pixels(truth)
    _check_same_shape(x, y)

    lam = cfg.lambda_l1
    l1_value = float(np.mean(np.abs(x - y)))
    if lam == 1.0:
        return l1_value, (np.sign(x - y) / x.size if with_gradient else None)

    ssim_value, ssim_grad = ssim_with_gradient(x, y, cfg, with_gradient)
    value = lam * l1_value + (1 - lam) * (1 - ssim_value)
    if not with_gradient:
        return value, None
    return value, lam * np.sign(x - y) / x.size - (1 - lam) * ssim_grad


def loss(rendered, truth, cfg=None):
    return loss_with_gradient(rendered, truth, cfg, with_gradient=False)[0]
