"""Finite-difference and brute-force oracles for the layer implementations.

The oracles here deliberately avoid the vectorized code paths in
``petnet.layers``: :func:`conv_bruteforce` is a plain nested loop and
:func:`finite_difference_gradient` only ever calls the function under test.
"""
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import NumericError, ShapeError
from .rng import Stream

DEFAULT_STEP = 1e-6
DEFAULT_TOL = 1e-6
BATCHNORM_TOL = 1e-5


def finite_difference_gradient(f, x, h=DEFAULT_STEP):
    """Central differences of scalar ``f`` at ``x``; ``x`` is restored afterwards."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite function value perturbing index {i}")
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def richardson_gradient(f, x, h=1e-4):
    """Central differences at h and h/2 combined to cancel the h**2 error term.

    Used for whole-model checks, where roundoff at tiny h swamps the small
    gradient entries that deep chains produce.
    """
    fine = finite_difference_gradient(f, x, h / 2)
    coarse = finite_difference_gradient(f, x, h)
    return (4.0 * fine - coarse) / 3.0


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def conv_bruteforce(x, weights, bias=None, padding="same"):
    """Direct nested-loop cross-correlation, stride 1, zero padding."""
    N, C, H, W = x.shape
    J, Cw, kh, kw = weights.shape
    if Cw != C:
        raise ShapeError(f"input has {C} channels, filters expect {Cw}")
    if padding == "same":
        top, left = (kh - 1) // 2, (kw - 1) // 2
        Ho, Wo = H, W
    else:
        top = left = 0
        Ho, Wo = H - kh + 1, W - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("kernel larger than input")
    out = np.zeros((N, J, Ho, Wo))
    for n in range(N):
        for j in range(J):
            for y in range(Ho):
                for xx in range(Wo):
                    acc = 0.0 if bias is None else float(bias[j])
                    for c in range(C):
                        for dy in range(kh):
                            for dx in range(kw):
                                iy, ix = y + dy - top, xx + dx - left
                                if 0 <= iy < H and 0 <= ix < W:
                                    acc += x[n, c, iy, ix] * weights[j, c, dy, dx]
                    out[n, j, y, xx] = acc
    return out


def fc_bruteforce(x, weights, bias):
    N, n_in = x.shape
    out = np.zeros((N, weights.shape[1]))
    for n in range(N):
        for o in range(weights.shape[1]):
            acc = float(bias[o])
            for i in range(n_in):
                acc += x[n, i] * weights[i, o]
            out[n, o] = acc
    return out


@dataclass
class GradCheckReport:
    name: str
    errors: dict = field(default_factory=dict)
    abs_errors: dict = field(default_factory=dict)
    tolerance: float = DEFAULT_TOL
    step: float = DEFAULT_STEP

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return self.max_error < self.tolerance


def _probe_check(name, forward, x, params, tolerance, seed, h=DEFAULT_STEP, richardson=False):
    """Compare layer_backward with finite differences of a random linear probe.

    ``forward(x)`` returns ``(out, cache)`` and must read ``params`` arrays by
    reference so in-place perturbation reaches it.
    """
    out, _ = forward(x)
    # magnitudes bounded away from zero so no adjoint entry drowns in roundoff
    s = Stream(seed).child(99)
    sign = np.where(s.uniform(out.size) < 0.5, -1.0, 1.0)
    probe = (sign * s.uniform(out.size, 0.5, 1.5)).reshape(out.shape)

    # subtracting the base output leaves the gradient unchanged and lets
    # untouched outputs cancel exactly, so only perturbed entries carry roundoff
    base = out.copy()

    def loss(_):
        return float(np.sum((forward(x)[0] - base) * probe))

    out, cache = forward(x)
    grad_in, pgrads = L.layer_backward(cache, probe)
    numeric = richardson_gradient if richardson else finite_difference_gradient
    report = GradCheckReport(name, tolerance=tolerance, step=h)
    for key, value, analytic in [("input", x, grad_in)] + [(k, v, pgrads[k]) for k, v in params.items()]:
        fd = numeric(loss, value, h)
        report.errors[key] = relative_error(analytic, fd)
        report.abs_errors[key] = float(np.max(np.abs(analytic - fd)))
    return report


def _input(shape, seed, away_from_zero=False):
    x = Stream(seed).normal(int(np.prod(shape))).reshape(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 1e-3, np.sign(x + 1e-12) * (np.abs(x) + 1e-2), x)
    return x


def _bank(shape, seed, bias=True):
    s = Stream(seed).child(7)
    w = s.uniform(int(np.prod(shape)), -1.0, 1.0).reshape(shape)
    b = s.uniform(shape[0], -1.0, 1.0) if bias else None
    return L.FilterBank(w, b)


def check_layer(kind, input_shape=(2, 3, 6, 6), tolerance=None, seed=0, h=DEFAULT_STEP,
                richardson=False, **config):
    """Gradient check for one layer kind on a seeded random input.

    With ``richardson`` the oracle is :func:`richardson_gradient` at step ``h``
    instead of a single central difference.
    """
    opts = {"h": h, "richardson": richardson}
    tol = tolerance if tolerance is not None else (BATCHNORM_TOL if kind == "batchnorm" else DEFAULT_TOL)
    C = input_shape[1] if len(input_shape) > 1 else None
    if kind in ("conv", "conv1x1", "transpose_conv"):
        k = {"conv": config.get("kernel", 3), "conv1x1": 1, "transpose_conv": 2}[kind]
        bank = _bank((config.get("filters", 4), C, k, k), seed)
        padding = config.get("padding", "same")
        fwd = {
            "conv": lambda x: L.conv2d_forward(x, bank, padding),
            "conv1x1": lambda x: L.conv1x1_forward(x, bank),
            "transpose_conv": lambda x: L.transpose_conv2_forward(x, bank),
        }[kind]
        name = f"conv[{padding}]" if kind == "conv" else kind
        return _probe_check(name, fwd, _input(input_shape, seed), bank.params(), tol, seed, **opts)
    if kind in ("relu", "sigmoid", "linear", "softmax"):
        x = _input(input_shape, seed, away_from_zero=kind == "relu")
        return _probe_check(kind, lambda v: L.activation_forward(kind, v), x, {}, tol, seed, **opts)
    if kind == "maxpool2":
        return _probe_check(kind, L.maxpool2_forward, _input(input_shape, seed), {}, tol, seed, **opts)
    if kind == "upsample":
        return _probe_check(kind, L.upsample_nearest_forward, _input(input_shape, seed), {}, tol, seed, **opts)
    if kind == "flatten":
        return _probe_check(kind, L.flatten_forward, _input(input_shape, seed), {}, tol, seed, **opts)
    if kind == "fc":
        x = _input((input_shape[0], int(np.prod(input_shape[1:]))), seed)
        s = Stream(seed).child(7)
        n_in, n_out = x.shape[1], config.get("units", 5)
        p = L.FcParams(s.uniform(n_in * n_out, -1, 1).reshape(n_in, n_out), s.uniform(n_out, -1, 1))
        return _probe_check(kind, lambda v: L.fc_forward(v, p), x, p.params(), tol, seed, **opts)
    if kind == "batchnorm":
        s = Stream(seed).child(7)
        p = L.BnParams(s.uniform(C, 0.5, 1.5), s.uniform(C, -0.5, 0.5), np.zeros(C), np.ones(C))
        mode = config.get("mode", "train")
        return _probe_check(f"batchnorm[{mode}]", lambda v: L.batchnorm_forward(v, p, mode),
                            _input(input_shape, seed), p.params(), tol, seed, **opts)
    raise KeyError(f"no gradient check registered for layer kind {kind!r}")


def check_softmax_cross_entropy(n=3, classes=4, seed=0, tolerance=DEFAULT_TOL):
    """Fused softmax + cross-entropy gradient vs differences through the softmax."""
    from .training import compute_loss

    z = _input((n, classes), seed)
    labels = Stream(seed).child(3).integers(n, classes)
    target = np.eye(classes)[labels]
    _, grad = compute_loss("cross_entropy", L.softmax(z), target)
    fd = finite_difference_gradient(lambda v: compute_loss("cross_entropy", L.softmax(v), target)[0], z)
    report = GradCheckReport("softmax+cross_entropy", tolerance=tolerance)
    report.errors["logits"] = relative_error(grad, fd)
    return report


def check_sigmoid_bce(shape=(2, 1, 4, 4), seed=0, tolerance=DEFAULT_TOL):
    from .training import compute_loss

    z = _input(shape, seed)
    target = (Stream(seed).child(3).uniform(int(np.prod(shape))) < 0.5).astype(float).reshape(shape)
    _, grad = compute_loss("binary_cross_entropy", L.sigmoid(z), target)
    fd = finite_difference_gradient(lambda v: compute_loss("binary_cross_entropy", L.sigmoid(v), target)[0], z)
    report = GradCheckReport("sigmoid+binary_cross_entropy", tolerance=tolerance)
    report.errors["logits"] = relative_error(grad, fd)
    return report


def check_model(model, x, target, loss_kind, tolerance=DEFAULT_TOL, h=1e-4, name=None):
    """End-to-end check: backward through the whole model vs finite differences of the loss."""
    from .network import backward, forward
    from .training import compute_loss, fused_head

    skip = fused_head(model.head, loss_kind)
    snapshot = {k: v.copy() for k, v in model.buffers().items()}

    def loss(_):
        out, _trace = forward(model, x, mode="train")
        return compute_loss(loss_kind, out, target)[0]

    out, trace = forward(model, x, mode="train")
    _, grad = compute_loss(loss_kind, out, target)
    grads = backward(model, trace, grad, skip_head=skip)
    report = GradCheckReport(name or model.arch.get("architecture", "model"), tolerance=tolerance, step=h)
    report.errors["input"] = relative_error(grads["input"], richardson_gradient(loss, x, h))
    for key, value in model.parameters().items():
        report.errors[key] = relative_error(grads[key], richardson_gradient(loss, value, h))
    for key, value in model.buffers().items():
        value[...] = snapshot[key]
    return report


def _toy_model_check(seed=0):
    from .network import build_toy_cnn

    model = build_toy_cnn(8, 8, filters=3, fc_width=6, head="sigmoid", seed=seed)
    x = _input((2, 1, 8, 8), seed)
    y = np.array([[0.0], [1.0]])
    return check_model(model, x, y, "binary_cross_entropy", name="toy_cnn end-to-end")


def _unet_check(seed=0):
    from .network import build_unet

    model = build_unet(4, 4, base_channels=2, depth=1, head="sigmoid", use_bn=True, seed=seed)
    x = _input((2, 1, 4, 4), seed)
    y = (Stream(seed).child(5).uniform(32) < 0.5).astype(float).reshape(2, 1, 4, 4)
    return check_model(model, x, y, "binary_cross_entropy", name="unet(base 2, depth 1) end-to-end")


def _merged(name, *checks):
    """One report for a layer kind built from several sub-checks."""

    def run():
        parts = [check() for check in checks]
        report = GradCheckReport(name, tolerance=min(p.tolerance for p in parts))
        for part in parts:
            for key, value in part.errors.items():
                report.errors[f"{part.name}:{key}"] = value
        return report

    return run


# every layer kind in layers.LAYER_KINDS must appear here, once
REGISTRY = {
    "conv": _merged("conv", lambda: check_layer("conv", padding="same"),
                    lambda: check_layer("conv", padding="valid")),
    "conv1x1": lambda: check_layer("conv1x1"),
    "relu": lambda: check_layer("relu"),
    "sigmoid": lambda: check_layer("sigmoid"),
    "linear": lambda: check_layer("linear"),
    "softmax": _merged("softmax", lambda: check_layer("softmax", input_shape=(3, 4)),
                       check_softmax_cross_entropy),
    "maxpool2": lambda: check_layer("maxpool2"),
    "flatten": lambda: check_layer("flatten"),
    "fc": lambda: check_layer("fc"),
    "batchnorm": _merged("batchnorm", lambda: check_layer("batchnorm"),
                         lambda: check_layer("batchnorm", mode="infer")),
    "upsample": lambda: check_layer("upsample"),
    "transpose_conv": lambda: check_layer("transpose_conv"),
}

END_TO_END = [check_sigmoid_bce, _toy_model_check, _unet_check]


def run_all(registry=None, end_to_end=None, kinds=L.LAYER_KINDS):
    """Run every registered check; returns ``(reports, missing_kinds)``."""
    registry = REGISTRY if registry is None else registry
    end_to_end = END_TO_END if end_to_end is None else end_to_end
    missing = [k for k in kinds if k not in registry]
    reports = []
    for kind in registry:
        report = registry[kind]()
        report.name = kind
        reports.append(report)
    for check in end_to_end:
        reports.append(check())
    return reports, missing


def format_table(reports, missing=()):
    lines = [f"{'check':<36} {'max rel err':>12} {'tol':>8}  result"]
    for r in reports:
        lines.append(f"{r.name:<36} {r.max_error:>12.3e} {r.tolerance:>8.0e}  {'PASS' if r.passed else 'FAIL'}")
    for kind in missing:
        lines.append(f"{kind:<36} {'-':>12} {'-':>8}  MISSING")
    return "\n".join(lines)
