"""Forward and backward passes for every layer kind.

Each ``*_forward`` returns ``(output, cache)``; :func:`layer_backward` consumes
the cache exactly once and returns ``(grad_input, param_grads)`` where
``param_grads`` maps parameter names to arrays shaped like the parameters.
All tensors are float64 in (N, C, H, W) layout.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError, UsageError
from .tensor import matmul

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

LAYER_KINDS = (
    "conv",
    "conv1x1",
    "relu",
    "sigmoid",
    "linear",
    "softmax",
    "maxpool2",
    "flatten",
    "fc",
    "batchnorm",
    "upsample",
    "transpose_conv",
)


@dataclass
class FilterBank:
    """``weights`` is (J, C_in, kh, kw); ``bias`` is (J,) or None."""

    weights: np.ndarray
    bias: np.ndarray = None

    def __post_init__(self):
        if self.weights.ndim != 4 or min(self.weights.shape) < 1:
            raise ShapeError(f"filter weights must be (J, C, kh, kw), got {self.weights.shape}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} filters")

    def params(self):
        out = {"weights": self.weights}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


@dataclass
class FcParams:
    """``weights`` is (n_in, n_out); ``bias`` is (n_out,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(f"bad fc parameter shapes {self.weights.shape}, {self.bias.shape}")

    def params(self):
        return {"weights": self.weights, "bias": self.bias}


@dataclass
class BnParams:
    scale: np.ndarray
    offset: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int) -> "BnParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))

    def params(self):
        return {"scale": self.scale, "offset": self.offset}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class LayerCache:
    kind: str
    out_shape: tuple
    data: dict = field(default_factory=dict)
    used: bool = False


def _cache(kind, out, **data):
    return LayerCache(kind, out.shape, data)


# --------------------------------------------------------------------------
# convolution


def _pads(kernel: int, padding: str):
    if padding == "same":
        lo = (kernel - 1) // 2
        return lo, kernel - 1 - lo
    if padding == "valid":
        return 0, 0
    raise ConfigError(f"unknown padding {padding!r}")


def _correlate(x, w):
    """Valid cross-correlation of padded x (N,C,H,W) with w (J,C,kh,kw)."""
    kh, kw = w.shape[2:]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N,C,H',W',kh,kw
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # N,H',W',J
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_forward(x, bank: FilterBank, padding="same"):
    """Stride-1 cross-correlation of ``x`` with the filter bank plus bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv input must be N×C×H×W, got {x.shape}")
    J, C, kh, kw = bank.weights.shape
    if x.shape[1] != C:
        raise ShapeError(f"input has {x.shape[1]} channels, filters expect {C}")
    (top, bottom), (left, right) = _pads(kh, padding), _pads(kw, padding)
    H, W = x.shape[2] + top + bottom, x.shape[3] + left + right
    if kh > H or kw > W:
        raise ShapeError(f"kernel {kh}×{kw} larger than padded input {H}×{W}")
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right))) if top + bottom + left + right else x
    out = _correlate(xp, bank.weights)
    if bank.bias is not None:
        out += bank.bias[None, :, None, None]
    return out, _cache("conv", out, xp=xp, pads=(top, bottom, left, right), bank=bank)


def _conv_backward(cache, g):
    xp, bank = cache.data["xp"], cache.data["bank"]
    top, bottom, left, right = cache.data["pads"]
    w = bank.weights
    kh, kw = w.shape[2:]
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    grads = {"weights": np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))}
    if bank.bias is not None:
        grads["bias"] = g.sum(axis=(0, 2, 3))
    # full correlation of the output gradient with flipped, channel-swapped filters
    gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gxp = _correlate(gp, flipped)
    H, W = gxp.shape[2] - top - bottom, gxp.shape[3] - left - right
    return np.ascontiguousarray(gxp[:, :, top:top + H, left:left + W]), grads


def conv1x1_forward(x, bank: FilterBank):
    """Per-pixel weighted sum over channels; a conv with a 1×1 kernel."""
    if bank.weights.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 needs 1×1 kernels, got {bank.weights.shape[2:]}")
    return conv2d_forward(x, bank, "valid")


def transpose_conv2_forward(x, bank: FilterBank):
    """Stride-2 transpose convolution with a 2×2 kernel.

    Weights are (J, C, 2, 2): input pixel (y, x) contributes
    ``x[n, c, y, x] * weights[j, c]`` to output block (2y:2y+2, 2x:2x+2).
    """
    if bank.weights.shape[2:] != (2, 2):
        raise ConfigError("transpose convolution supports only kernel 2 with stride 2")
    if x.ndim != 4 or x.shape[1] != bank.weights.shape[1]:
        raise ShapeError(f"input {x.shape} incompatible with filters {bank.weights.shape}")
    N, _, H, W = x.shape
    J = bank.weights.shape[0]
    blocks = np.tensordot(x, bank.weights, axes=([1], [1]))  # N,H,W,J,2,2
    out = np.ascontiguousarray(blocks.transpose(0, 3, 1, 4, 2, 5)).reshape(N, J, 2 * H, 2 * W)
    if bank.bias is not None:
        out += bank.bias[None, :, None, None]
    return out, _cache("transpose_conv", out, x=x, bank=bank)


def _transpose_conv_backward(cache, g):
    x, bank = cache.data["x"], cache.data["bank"]
    N, J, H2, W2 = g.shape
    gb = g.reshape(N, J, H2 // 2, 2, W2 // 2, 2)  # n,j,y,a,x,b
    grad_in = np.tensordot(gb, bank.weights, axes=([1, 3, 5], [0, 2, 3]))  # n,y,x,c
    grads = {"weights": np.tensordot(gb, x, axes=([0, 2, 4], [0, 2, 3])).transpose(0, 3, 1, 2)}
    if bank.bias is not None:
        grads["bias"] = g.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_in.transpose(0, 3, 1, 2)), grads


# --------------------------------------------------------------------------
# activations


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    if z.shape[-1] == 0:
        raise ShapeError("softmax over an empty class axis")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def activation_forward(kind: str, x):
    if kind == "relu":
        out = np.maximum(x, 0.0)
        return out, _cache(kind, out, mask=x > 0)
    if kind == "sigmoid":
        out = sigmoid(x)
    elif kind == "linear":
        out = x.copy()
    elif kind == "softmax":
        out = softmax(x)
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return out, _cache(kind, out, y=out)


def _activation_backward(cache, g):
    kind = cache.kind
    if kind == "relu":
        return g * cache.data["mask"], {}
    if kind == "linear":
        return g.copy(), {}
    y = cache.data["y"]
    if kind == "sigmoid":
        return g * y * (1.0 - y), {}
    # softmax Jacobian-vector product along the class axis
    return y * (g - (g * y).sum(axis=-1, keepdims=True)), {}


# --------------------------------------------------------------------------
# pooling, reshaping, resampling


def maxpool2_forward(x):
    """Non-overlapping 2×2 max pooling; ties resolve to the first row-major index."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {H}×{W}; pad or resize the input")
    patches = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // 2, W // 2, 4)
    arg = patches.argmax(axis=-1)
    out = np.take_along_axis(patches, arg[..., None], axis=-1)[..., 0]
    return out, _cache("maxpool2", out, arg=arg, in_shape=x.shape)


def _maxpool2_backward(cache, g):
    N, C, H, W = cache.data["in_shape"]
    routed = np.zeros((N, C, H // 2, W // 2, 4))
    np.put_along_axis(routed, cache.data["arg"][..., None], g[..., None], axis=-1)
    grad = routed.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
    return grad, {}


def upsample_nearest_forward(x):
    out = x.repeat(2, axis=2).repeat(2, axis=3)
    return out, _cache("upsample", out)


def _upsample_backward(cache, g):
    N, C, H2, W2 = g.shape
    return g.reshape(N, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)), {}


def flatten_forward(x):
    out = x.reshape(x.shape[0], -1)
    return out, _cache("flatten", out, in_shape=x.shape)


def fc_forward(x, p: FcParams):
    if x.ndim != 2:
        raise ShapeError(f"fc input must be flattened to N×n_in, got {x.shape}")
    out = matmul(x, p.weights) + p.bias
    return out, _cache("fc", out, x=x, p=p)


def _fc_backward(cache, g):
    x, p = cache.data["x"], cache.data["p"]
    return g @ p.weights.T, {"weights": x.T @ g, "bias": g.sum(axis=0)}


# --------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x, p: BnParams, mode="train"):
    """Per-channel normalization over (N, H, W).

    In train mode the batch statistics are used and the running statistics
    are updated in place; in infer mode the running statistics are used.
    """
    if x.ndim != 4 or x.shape[1] != p.scale.shape[0]:
        raise ShapeError(f"batchnorm over {p.scale.shape[0]} channels got input {x.shape}")
    shape = (1, -1, 1, 1)
    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise NumericError("batchnorm train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        p.running_mean *= 1.0 - p.momentum
        p.running_mean += p.momentum * mean
        p.running_var *= 1.0 - p.momentum
        p.running_var += p.momentum * var
    elif mode == "infer":
        mean, var = p.running_mean, p.running_var
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = p.scale.reshape(shape) * xhat + p.offset.reshape(shape)
    return out, _cache("batchnorm", out, xhat=xhat, inv_std=inv_std, p=p, mode=mode)


def _batchnorm_backward(cache, g):
    xhat, inv_std, p = cache.data["xhat"], cache.data["inv_std"], cache.data["p"]
    shape = (1, -1, 1, 1)
    grads = {"scale": (g * xhat).sum(axis=(0, 2, 3)), "offset": g.sum(axis=(0, 2, 3))}
    gx = g * p.scale.reshape(shape)
    if cache.data["mode"] == "infer":
        return gx * inv_std.reshape(shape), grads
    mean_g = gx.mean(axis=(0, 2, 3), keepdims=True)
    mean_gx = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
    return inv_std.reshape(shape) * (gx - mean_g - xhat * mean_gx), grads


# --------------------------------------------------------------------------

_BACKWARD = {
    "conv": _conv_backward,
    "conv1x1": _conv_backward,
    "relu": _activation_backward,
    "sigmoid": _activation_backward,
    "linear": _activation_backward,
    "softmax": _activation_backward,
    "maxpool2": _maxpool2_backward,
    "flatten": lambda c, g: (g.reshape(c.data["in_shape"]), {}),
    "fc": _fc_backward,
    "batchnorm": _batchnorm_backward,
    "upsample": _upsample_backward,
    "transpose_conv": _transpose_conv_backward,
}


def layer_backward(cache: LayerCache, grad_out):
    """Gradient of the loss w.r.t. the layer input and its parameters."""
    if cache.used:
        raise UsageError(f"{cache.kind} cache already consumed by a backward pass")
    if grad_out.shape != cache.out_shape:
        raise ShapeError(f"{cache.kind} backward got gradient {grad_out.shape}, expected {cache.out_shape}")
    cache.used = True
    return _BACKWARD[cache.kind](cache, grad_out)


def glorot_uniform(shape, stream):
    """Uniform in [-s, s] with s = sqrt(6 / (fan_in + fan_out))."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return stream.uniform(int(np.prod(shape)), -s, s).reshape(shape)
