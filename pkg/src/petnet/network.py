"""Layer graphs: a chain of nodes plus named skip connections.

Every node consumes the output of the node before it. A ``concat`` node also
consumes the output of an earlier node named by ``source``; the source's
channels come first in the result.
"""
import copy
from dataclasses import dataclass, fields

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError, UsageError
from .rng import Stream
from .tensor import concat_channels

HEADS = ("sigmoid", "linear", "softmax")
NODE_KINDS = (
    "conv", "conv1x1", "activation", "maxpool2", "flatten", "fc",
    "batchnorm", "upsample", "transpose_conv", "concat",
)


@dataclass
class LayerSpec:
    kind: str
    name: str
    filters: int = 0
    kernel: int = 3
    padding: str = "same"
    bias: bool = True
    activation: str = ""
    units: int = 0
    source: str = ""

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")

    def to_text(self) -> str:
        """``kind key=value ...`` listing only the fields the kind uses."""
        keys = {
            "conv": ("filters", "kernel", "padding", "bias"),
            "conv1x1": ("filters", "bias"),
            "transpose_conv": ("filters", "bias"),
            "activation": ("activation",),
            "fc": ("units",),
            "concat": ("source",),
        }.get(self.kind, ())
        parts = [self.kind]
        for key in keys:
            value = getattr(self, key)
            parts.append(f"{key}={str(value).lower() if isinstance(value, bool) else value}")
        return " ".join(parts)

    @classmethod
    def from_text(cls, name: str, text: str) -> "LayerSpec":
        kind, *pairs = text.split()
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for pair in pairs:
            key, sep, value = pair.partition("=")
            if not sep or key not in types or key in ("kind", "name"):
                raise ConfigError(f"bad layer field {pair!r} in node {name}")
            if types[key] in (int, "int"):
                kwargs[key] = int(value)
            elif types[key] in (bool, "bool"):
                kwargs[key] = value == "true"
            else:
                kwargs[key] = value
        return cls(kind=kind, name=name, **kwargs)


class Trace:
    """Per-node caches from one forward call."""

    def __init__(self, model, caches, shapes):
        self.model_id = id(model)
        self.stamp = model._forward_count
        self.caches = caches
        self.shapes = shapes
        self.out_shape = shapes[-1]
        self.used = False


class Model:
    def __init__(self, nodes, input_shape, seed=0, arch=None):
        self.nodes = list(nodes)
        self.input_shape = tuple(int(d) for d in input_shape)  # (C, H, W) or (n_features,)
        self.seed = int(seed)
        self.arch = dict(arch or {})
        self.banks = {}
        self._forward_count = 0
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ConfigError("node names must be unique")
        index = {}
        for i, node in enumerate(self.nodes):
            if node.kind == "concat" and index.get(node.source) is None:
                raise ConfigError(f"concat node {node.name} references {node.source!r}, which is not an earlier node")
            index[node.name] = i
        self._index = index
        if not self.nodes or self.nodes[-1].kind != "activation" or self.nodes[-1].activation not in HEADS:
            raise ConfigError("the last node must be a sigmoid, linear or softmax activation")
        self.shapes = infer_shapes(self, (1,) + self.input_shape)

    @property
    def head(self) -> str:
        return self.nodes[-1].activation

    def initialize(self, seed=None):
        """Create parameter banks: Glorot-uniform weights, zero biases, unit BN scale."""
        if seed is not None:
            self.seed = int(seed)
        root = Stream(self.seed)
        in_shapes = [(1,) + self.input_shape] + self.shapes[:-1]
        self.banks = {}
        for i, (node, in_shape) in enumerate(zip(self.nodes, in_shapes)):
            stream = root.child(i)
            if node.kind in ("conv", "conv1x1", "transpose_conv"):
                k = {"conv": node.kernel, "conv1x1": 1, "transpose_conv": 2}[node.kind]
                shape = (node.filters, in_shape[1], k, k)
                bias = np.zeros(node.filters) if node.bias else None
                self.banks[node.name] = L.FilterBank(L.glorot_uniform(shape, stream), bias)
            elif node.kind == "fc":
                shape = (in_shape[1], node.units)
                self.banks[node.name] = L.FcParams(L.glorot_uniform(shape, stream), np.zeros(node.units))
            elif node.kind == "batchnorm":
                self.banks[node.name] = L.BnParams.fresh(in_shape[1])
        return self

    def parameters(self) -> dict:
        """Learnable arrays keyed ``node.param``; the arrays are live, not copies."""
        out = {}
        for node in self.nodes:
            bank = self.banks.get(node.name)
            if bank is not None:
                for key, value in bank.params().items():
                    out[f"{node.name}.{key}"] = value
        return out

    def buffers(self) -> dict:
        out = {}
        for name, bank in self.banks.items():
            if isinstance(bank, L.BnParams):
                for key, value in bank.buffers().items():
                    out[f"{name}.{key}"] = value
        return out

    def state(self) -> dict:
        return {**self.parameters(), **self.buffers()}

    def load_state(self, state: dict):
        current = self.state()
        if set(current) != set(state):
            raise ConfigError(f"state keys differ: {sorted(set(current) ^ set(state))}")
        for key, value in state.items():
            if current[key].shape != value.shape:
                raise ShapeError(f"{key}: expected {current[key].shape}, got {value.shape}")
            current[key][...] = value

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def spec_lines(self):
        return [(node.name, node.to_text()) for node in self.nodes]


def _node_shape(node, shape, source_shape=None):
    """Output shape of ``node`` given its input shape (batch axis included)."""
    kind = node.kind
    spatial = len(shape) == 4
    if kind in ("conv", "conv1x1", "transpose_conv", "maxpool2", "batchnorm", "upsample") and not spatial:
        raise ShapeError(f"{kind} needs an N×C×H×W input, got {shape}")
    if kind == "conv":
        N, C, H, W = shape
        if node.padding == "valid":
            H, W = H - node.kernel + 1, W - node.kernel + 1
        if H < 1 or W < 1:
            raise ShapeError(f"kernel {node.kernel} larger than input {shape}")
        return (N, node.filters, H, W)
    if kind == "conv1x1":
        return (shape[0], node.filters) + shape[2:]
    if kind == "transpose_conv":
        return (shape[0], node.filters, 2 * shape[2], 2 * shape[3])
    if kind == "upsample":
        return shape[:2] + (2 * shape[2], 2 * shape[3])
    if kind == "maxpool2":
        if shape[2] % 2 or shape[3] % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {shape[2]}×{shape[3]}")
        return shape[:2] + (shape[2] // 2, shape[3] // 2)
    if kind == "flatten":
        return (shape[0], int(np.prod(shape[1:])))
    if kind == "fc":
        if len(shape) != 2:
            raise ShapeError(f"fc needs a flattened input, got {shape}")
        return (shape[0], node.units)
    if kind == "concat":
        if len(source_shape) != len(shape) or source_shape[2:] != shape[2:] or source_shape[0] != shape[0]:
            raise ShapeError(f"cannot concatenate {source_shape} with {shape}")
        return (shape[0], source_shape[1] + shape[1]) + shape[2:]
    return shape


def infer_shapes(model: Model, input_shape):
    """Per-node output shapes for an input of ``input_shape`` (batch axis first)."""
    shapes = []
    shape = tuple(input_shape)
    for node in model.nodes:
        source = shapes[model._index[node.source]] if node.kind == "concat" else None
        try:
            shape = _node_shape(node, shape, source)
        except ShapeError as exc:
            raise ShapeError(f"node {node.name} ({node.kind}): {exc}") from None
        shapes.append(shape)
    return shapes


def forward(model: Model, x, mode="infer"):
    """Run every node in order; returns the head output and a :class:`Trace`."""
    expected = model.input_shape
    if x.shape[1:] != expected:
        raise ShapeError(f"model expects input {expected} per sample, got {x.shape[1:]}")
    model._forward_count += 1
    outputs, caches = [], []
    h = x
    for node in model.nodes:
        bank = model.banks.get(node.name)
        kind = node.kind
        if kind == "conv":
            h, cache = L.conv2d_forward(h, bank, node.padding)
        elif kind == "conv1x1":
            h, cache = L.conv1x1_forward(h, bank)
        elif kind == "transpose_conv":
            h, cache = L.transpose_conv2_forward(h, bank)
        elif kind == "activation":
            h, cache = L.activation_forward(node.activation, h)
        elif kind == "maxpool2":
            h, cache = L.maxpool2_forward(h)
        elif kind == "flatten":
            h, cache = L.flatten_forward(h)
        elif kind == "fc":
            h, cache = L.fc_forward(h, bank)
        elif kind == "batchnorm":
            h, cache = L.batchnorm_forward(h, bank, mode)
        elif kind == "upsample":
            h, cache = L.upsample_nearest_forward(h)
        else:  # concat
            source = outputs[model._index[node.source]]
            cache = source.shape[1]
            h = concat_channels(source, h)
        outputs.append(h)
        caches.append(cache)
    return h, Trace(model, caches, [o.shape for o in outputs])


def backward(model: Model, trace: Trace, loss_grad, skip_head=False):
    """Parameter gradients keyed like :meth:`Model.parameters`.

    ``loss_grad`` is the gradient w.r.t. the head output, or w.r.t. the head's
    input when ``skip_head`` is set (fused softmax/sigmoid entropy losses).
    Also returns the gradient w.r.t. the model input as ``grads["input"]``.
    """
    if trace.used or trace.model_id != id(model) or trace.stamp != model._forward_count:
        raise UsageError("backward needs the trace of the immediately preceding forward call")
    if loss_grad.shape != trace.out_shape:
        raise ShapeError(f"loss gradient {loss_grad.shape} does not match output {trace.out_shape}")
    trace.used = True
    pending = {len(model.nodes) - 1: loss_grad}
    grads = {}

    def push(i, g):
        pending[i] = pending[i] + g if i in pending else g

    for i in range(len(model.nodes) - 1, -1, -1):
        node = model.nodes[i]
        g = pending.pop(i, None)
        if g is None:  # output of this node does not reach the loss
            g = np.zeros(trace.shapes[i])
        cache = trace.caches[i]
        if node.kind == "concat":
            split = cache
            push(model._index[node.source], g[:, :split])
            grad_in = g[:, split:]
        elif skip_head and i == len(model.nodes) - 1:
            cache.used = True
            grad_in = g
        else:
            grad_in, pgrads = L.layer_backward(cache, g)
            for key, value in pgrads.items():
                grads[f"{node.name}.{key}"] = value
        if i > 0:
            push(i - 1, grad_in)
        else:
            grads["input"] = grad_in
    return grads


def parameter_count(model: Model) -> int:
    return int(sum(v.size for v in model.parameters().values()))


# --------------------------------------------------------------------------
# reference architectures


def build_toy_cnn(height, width, filters=8, fc_width=32, head="sigmoid", classes=4, channels=1, seed=0):
    """conv → relu → maxpool → flatten → fc → relu → fc → head."""
    if height % 2 or width % 2:
        raise ShapeError(f"toy CNN input must have even dims, got {height}×{width}")
    if head not in HEADS:
        raise ConfigError(f"unknown head {head!r}")
    out_units = classes if head == "softmax" else 1
    nodes = [
        LayerSpec("conv", "conv", filters=filters, kernel=3),
        LayerSpec("activation", "relu1", activation="relu"),
        LayerSpec("maxpool2", "pool"),
        LayerSpec("flatten", "flatten"),
        LayerSpec("fc", "fc1", units=fc_width),
        LayerSpec("activation", "relu2", activation="relu"),
        LayerSpec("fc", "fc2", units=out_units),
        LayerSpec("activation", "head", activation=head),
    ]
    arch = {"architecture": "toy_cnn", "filters": filters, "fc_width": fc_width,
            "head": head, "classes": classes}
    return Model(nodes, (channels, height, width), seed, arch).initialize()


def build_unet(height, width, base_channels=8, depth=3, head="sigmoid", use_bn=True,
               upsample="transpose", allow_bn_synthesis=False, channels=1, seed=0):
    """Encoder-decoder with skip concatenations and a 1×1 conv head.

    Convs followed by batch norm carry no bias (the BN offset plays that role).
    """
    if depth < 1:
        raise ConfigError("U-Net depth must be >= 1")
    if head not in ("sigmoid", "linear"):
        raise ConfigError(f"U-Net head must be sigmoid or linear, got {head!r}")
    if head == "linear" and use_bn and not allow_bn_synthesis:
        raise ConfigError("batch norm should be removed for image synthesis (linear head); "
                          "set allow_bn_synthesis to override")
    if upsample not in ("transpose", "nearest"):
        raise ConfigError(f"unknown upsample mode {upsample!r}")
    nodes = []

    def block(prefix, ch):
        for k in (1, 2):
            nodes.append(LayerSpec("conv", f"{prefix}_conv{k}", filters=ch, kernel=3, bias=not use_bn))
            if use_bn:
                nodes.append(LayerSpec("batchnorm", f"{prefix}_bn{k}"))
            nodes.append(LayerSpec("activation", f"{prefix}_relu{k}", activation="relu"))

    for s in range(depth):
        block(f"enc{s}", base_channels * 2 ** s)
        nodes.append(LayerSpec("maxpool2", f"enc{s}_pool"))
    block("mid", base_channels * 2 ** depth)
    for s in reversed(range(depth)):
        ch = base_channels * 2 ** s
        if upsample == "transpose":
            nodes.append(LayerSpec("transpose_conv", f"dec{s}_up", filters=ch))
        else:
            nodes.append(LayerSpec("upsample", f"dec{s}_up"))
        nodes.append(LayerSpec("concat", f"dec{s}_cat", source=f"enc{s}_relu2"))
        block(f"dec{s}", ch)
    nodes.append(LayerSpec("conv1x1", "out_conv", filters=1))
    nodes.append(LayerSpec("activation", "head", activation=head))
    arch = {"architecture": "unet", "base_channels": base_channels, "depth": depth, "head": head,
            "use_bn": use_bn, "upsample": upsample}
    return Model(nodes, (channels, height, width), seed, arch).initialize()
