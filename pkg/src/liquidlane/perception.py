"""Convolutional feature head, saliency maps, and frame noise utilities.

Frames are grayscale (height, width) arrays with values in [0, 1].  The
head is three valid-mode strided convolutions with ReLU followed by an
affine map to the feature vector consumed by the recurrent policy:

    48x160 -> conv 5x5/2 ch8 -> conv 5x5/2 ch16 -> conv 3x3/2 ch16
           -> flatten -> affine -> 64 features

Saliency follows the activation-backprojection scheme: average each
layer's post-ReLU maps over channels, then walk from the deepest layer
to the input, upsampling (nearest neighbor) and pointwise-multiplying
with the shallower mean at every stage, and min-max normalize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .cells import DimensionMismatchError

FRAME_HEIGHT = 48
FRAME_WIDTH = 160
FEATURE_SIZE = 64

# (out_channels, kernel, stride) of the conv layers.
CONV_SPECS = ((8, 5, 2), (16, 5, 2), (16, 3, 2))


@dataclass
class ConvLayer:
    w: np.ndarray  # (kh, kw, in_channels, out_channels)
    b: np.ndarray  # (out_channels,)
    stride: int


@dataclass
class ConvHead:
    layers: list[ConvLayer]
    w_out: np.ndarray  # (flattened deepest map, feature_size)
    b_out: np.ndarray  # (feature_size,)
    in_height: int = FRAME_HEIGHT
    in_width: int = FRAME_WIDTH

    @property
    def feature_size(self) -> int:
        return self.b_out.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for idx, layer in enumerate(self.layers):
            out[f"conv{idx}.w"] = layer.w
            out[f"conv{idx}.b"] = layer.b
        out["out.w"] = self.w_out
        out["out.b"] = self.b_out
        return out

    def copy(self) -> "ConvHead":
        return ConvHead(
            layers=[ConvLayer(l.w.copy(), l.b.copy(), l.stride) for l in self.layers],
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
            in_height=self.in_height,
            in_width=self.in_width,
        )


def _conv_output_size(size: int, kernel: int, stride: int) -> int:
    if size < kernel:
        raise DimensionMismatchError(f"input extent {size} smaller than kernel {kernel}")
    return (size - kernel) // stride + 1


def conv_map_shapes(
    in_height: int, in_width: int, specs=CONV_SPECS
) -> list[tuple[int, int]]:
    """Spatial (height, width) of each conv layer's output."""
    shapes = []
    h, w = in_height, in_width
    for _, kernel, stride in specs:
        h = _conv_output_size(h, kernel, stride)
        w = _conv_output_size(w, kernel, stride)
        shapes.append((h, w))
    return shapes


def init_conv_head(
    rng: np.random.Generator,
    in_height: int = FRAME_HEIGHT,
    in_width: int = FRAME_WIDTH,
    feature_size: int = FEATURE_SIZE,
    specs=CONV_SPECS,
) -> ConvHead:
    """Fresh head with U[-s, s] kernels (s = fan-in^-1/2) and zero biases."""
    layers = []
    in_ch = 1
    for out_ch, kernel, stride in specs:
        fan_in = kernel * kernel * in_ch
        s = fan_in ** -0.5
        layers.append(
            ConvLayer(
                w=rng.uniform(-s, s, size=(kernel, kernel, in_ch, out_ch)),
                b=np.zeros(out_ch),
                stride=stride,
            )
        )
        in_ch = out_ch
    h, w = conv_map_shapes(in_height, in_width, specs)[-1]
    flat = h * w * in_ch
    s = flat ** -0.5
    return ConvHead(
        layers=layers,
        w_out=rng.uniform(-s, s, size=(flat, feature_size)),
        b_out=np.zeros(feature_size),
        in_height=in_height,
        in_width=in_width,
    )


def _im2col(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, int, int]:
    """(B*Ho*Wo, kernel*kernel*C) patch matrix of a (B, H, W, C) stack."""
    view = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    view = view[:, ::stride, ::stride]  # (B, Ho, Wo, C, kh, kw)
    b, ho, wo = view.shape[:3]
    cols = view.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, -1)
    return np.ascontiguousarray(cols), ho, wo


def _conv_layer_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    kernel = layer.w.shape[0]
    cols, ho, wo = _im2col(x, kernel, layer.stride)
    flat_w = layer.w.reshape(-1, layer.w.shape[-1])
    out = cols @ flat_w.astype(cols.dtype) + layer.b.astype(cols.dtype)
    out = out.reshape(x.shape[0], ho, wo, -1)
    return np.maximum(out, 0.0)


def _conv_layer_backward(
    x: np.ndarray, layer: ConvLayer, post: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Given layer input x, post-ReLU output and its gradient, return
    (dw, db, dx)."""
    dout = dout * (post > 0)
    kernel = layer.w.shape[0]
    stride = layer.stride
    cols, ho, wo = _im2col(x, kernel, stride)
    b = x.shape[0]
    dflat = dout.reshape(b * ho * wo, -1)
    dw = (cols.T @ dflat).reshape(layer.w.shape)
    db = dflat.sum(axis=0)
    dcols = dflat @ layer.w.reshape(-1, layer.w.shape[-1]).T.astype(dflat.dtype)
    dcols = dcols.reshape(b, ho, wo, kernel, kernel, x.shape[-1])
    dx = np.zeros_like(x)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (
                dcols[:, :, :, i, j, :]
            )
    return dw, db, dx


def conv_forward_batch(
    head: ConvHead, frames: np.ndarray, keep_maps: bool = False
) -> tuple[np.ndarray, dict]:
    """Features (B, F) for a (B, H, W) frame stack, plus backward cache.

    The cache holds each layer's input and post-ReLU output; with
    ``keep_maps`` the post-ReLU stacks are also exposed under "maps" in
    channel-first order for saliency computation.
    """
    frames = np.asarray(frames)
    if frames.shape[-2:] != (head.in_height, head.in_width):
        raise DimensionMismatchError(
            f"frame shape {frames.shape[-2:]} != ({head.in_height}, {head.in_width})"
        )
    x = frames[..., None]  # (B, H, W, 1)
    inputs = []
    posts = []
    for layer in head.layers:
        inputs.append(x)
        x = _conv_layer_forward(x, layer)
        posts.append(x)
    b = x.shape[0]
    flat = x.reshape(b, -1)
    features = flat @ head.w_out.astype(flat.dtype) + head.b_out.astype(flat.dtype)
    cache = {"inputs": inputs, "posts": posts, "flat": flat}
    if keep_maps:
        cache["maps"] = [p.transpose(0, 3, 1, 2) for p in posts]
    return features, cache


def conv_backward_batch(
    head: ConvHead, cache: dict, dfeatures: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of every head array plus the frame gradient (B, H, W)."""
    flat = cache["flat"]
    grads = {
        "out.w": flat.T @ dfeatures,
        "out.b": dfeatures.sum(axis=0),
    }
    dx = (dfeatures @ head.w_out.T.astype(dfeatures.dtype)).reshape(cache["posts"][-1].shape)
    for idx in range(len(head.layers) - 1, -1, -1):
        dw, db, dx = _conv_layer_backward(
            cache["inputs"][idx], head.layers[idx], cache["posts"][idx], dx
        )
        grads[f"conv{idx}.w"] = dw
        grads[f"conv{idx}.b"] = db
    return grads, dx[..., 0]


def conv_forward(
    head: ConvHead, frame: np.ndarray, keep_maps: bool = False
) -> np.ndarray | tuple[np.ndarray, list[np.ndarray]]:
    """Feature vector for one frame; with keep_maps also the per-layer
    post-activation stacks (channels first), ordered shallow to deep."""
    features, cache = conv_forward_batch(head, frame[None], keep_maps=keep_maps)
    if keep_maps:
        return features[0], [m[0] for m in cache["maps"]]
    return features[0]


def lipschitz_bound(head: ConvHead) -> float:
    """Max-norm Lipschitz constant bound: product of per-layer absolute
    kernel sums (ReLU is 1-Lipschitz)."""
    bound = 1.0
    for layer in head.layers:
        # (kh, kw, in, out): worst output channel over summed |w|
        bound *= float(np.abs(layer.w).sum(axis=(0, 1, 2)).max())
    bound *= float(np.abs(head.w_out).sum(axis=0).max())
    return bound


def _upsample_nearest(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = img.shape
    ho, wo = shape
    rows = np.minimum((np.arange(ho) * h) // ho, h - 1)
    cols = np.minimum((np.arange(wo) * w) // wo, w - 1)
    return img[rows][:, cols]


def visual_backprop(
    layer_maps: list[np.ndarray],
    input_shape: tuple[int, int] = (FRAME_HEIGHT, FRAME_WIDTH),
) -> np.ndarray:
    """Relevance map in [0, 1] from per-layer activation stacks.

    ``layer_maps`` are (channels, height, width) stacks ordered shallow
    to deep.  A constant pre-normalization map yields all zeros.
    """
    if not layer_maps:
        raise ValueError("visual_backprop requires at least one layer map")
    means = [np.asarray(m, dtype=float).mean(axis=0) for m in layer_maps]
    relevance = means[-1]
    for level in range(len(means) - 2, -1, -1):
        relevance = _upsample_nearest(relevance, means[level].shape) * means[level]
    relevance = _upsample_nearest(relevance, input_shape)
    lo = relevance.min()
    hi = relevance.max()
    if hi - lo <= 0.0:
        return np.zeros(input_shape)
    return (relevance - lo) / (hi - lo)


def add_gaussian_noise(frame: np.ndarray, variance: float, seed) -> np.ndarray:
    """frame + N(0, variance) per pixel, clamped to [0, 1].

    ``seed`` may be an int, a SeedSequence, or a Generator.  The noise is
    sqrt(variance) times a standard-normal draw, so two calls with the
    same seed and different variances use identical underlying draws.
    """
    if variance < 0:
        raise ValueError(f"variance must be nonnegative, got {variance}")
    frame = np.asarray(frame, dtype=float)
    if variance == 0:
        return frame.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noisy = frame + np.sqrt(variance) * rng.standard_normal(frame.shape)
    return np.clip(noisy, 0.0, 1.0)


# --- image I/O -----------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image_png(img: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=float) / 255.0


def save_image_pgm(img: np.ndarray, path) -> None:
    data = to_uint8(img)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + data.tobytes())


def save_image_csv(img: np.ndarray, path) -> None:
    np.savetxt(path, np.asarray(img, dtype=float), delimiter=",", fmt="%.17g")


def load_image_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))
