"""Independent reference implementations used as test oracles.

Deliberately naive (explicit loops, textbook formulas, no code shared
with the package) so agreement with the production implementations is
meaningful.
"""

import math

import numpy as np


def reference_pearson_abs(x, y) -> float:
    """|Pearson r| straight from the definition."""
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    dx = sum((a - mx) ** 2 for a in x)
    dy = sum((b - my) ** 2 for b in y)
    if dx == 0.0 or dy == 0.0:
        return 0.0
    return abs(num / math.sqrt(dx * dy))


def _gaussian_kernel_2d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            g[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2))
    return g / g.sum()


def reference_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5),
    valid-mode windows, C1=0.01^2, C2=0.03^2; images smaller than the
    window fall back to one uniform global window."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c1, c2 = 0.01**2, 0.03**2

    def local(ax, bx, w):
        mu_a = (w * ax).sum()
        mu_b = (w * bx).sum()
        var_a = (w * ax * ax).sum() - mu_a * mu_a
        var_b = (w * bx * bx).sum() - mu_b * mu_b
        cov = (w * ax * bx).sum() - mu_a * mu_b
        return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
            (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        )

    if min(a.shape) < 11:
        w = np.full(a.shape, 1.0 / a.size)
        return float(local(a, b, w))
    w = _gaussian_kernel_2d()
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            vals.append(local(a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11], w))
    return float(np.mean(vals))


def reference_adam(params, grad_fn, lr, beta1=0.9, beta2=0.999, eps=1e-8, steps=100):
    """Plain Adam (no weight decay), textbook form with explicit
    bias-corrected moments; params is a dict name -> array (copied)."""
    params = {k: v.copy() for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(val) for k, val in params.items()}
    for t in range(1, steps + 1):
        grads = grad_fn(params)
        for k in params:
            m[k] = beta1 * m[k] + (1 - beta1) * grads[k]
            v[k] = beta2 * v[k] + (1 - beta2) * grads[k] ** 2
            m_hat = m[k] / (1 - beta1**t)
            v_hat = v[k] / (1 - beta2**t)
            params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def reference_conv2d_relu(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """Direct nested-loop valid convolution + ReLU; x (H, W, Cin),
    w (kh, kw, Cin, Cout), b (Cout,)."""
    kh, kw, cin, cout = w.shape
    oh = (x.shape[0] - kh) // stride + 1
    ow = (x.shape[1] - kw) // stride + 1
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            patch = x[i * stride : i * stride + kh, j * stride : j * stride + kw, :]
            for c in range(cout):
                out[i, j, c] = (patch * w[:, :, :, c]).sum() + b[c]
    return np.maximum(out, 0.0)


def reference_upsample_nearest(img: np.ndarray, shape) -> np.ndarray:
    """Floor-index nearest-neighbor resize."""
    ho, wo = shape
    h, w = img.shape
    out = np.empty((ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[i, j] = img[(i * h) // ho, (j * w) // wo]
    return out


def reference_visual_backprop(layer_maps, input_shape):
    """Mean maps multiplied shallow-ward with nearest upsampling, then
    min-max normalized; layer_maps are channel-first (C, H, W) arrays
    ordered shallow to deep."""
    means = [np.asarray(m, dtype=float).mean(axis=0) for m in layer_maps]
    acc = means[-1]
    for level in reversed(range(len(means) - 1)):
        acc = reference_upsample_nearest(acc, means[level].shape) * means[level]
    acc = reference_upsample_nearest(acc, input_shape)
    lo, hi = acc.min(), acc.max()
    if hi - lo <= 0:
        return np.zeros(input_shape)
    return (acc - lo) / (hi - lo)
