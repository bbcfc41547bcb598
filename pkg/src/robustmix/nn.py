"""Layered classifier models, SGD with momentum, cosine learning rate.

A model is a ``ModelSpec`` (layer chain + fixed input normalization) plus a
named parameter dict of graph leaves.  The normalization head is part of the
forward pass but never trained, so gradients flow through it back to raw
pixels in [0,1].
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from math import cos, pi, sqrt

import numpy as np

from . import tensor as T
from .data import CIFAR10_MEAN, CIFAR10_STD
from .tensor import Tensor

__all__ = [
    "Conv",
    "Dense",
    "Relu",
    "ResBlock",
    "GlobalAvgPool",
    "Flatten",
    "ModelSpec",
    "Model",
    "build_model",
    "model_forward",
    "set_mode",
    "OptimizerState",
    "init_optimizer",
    "sgd_step",
    "LrSchedule",
    "cosine_lr",
    "parameter_count",
    "parameter_checksum",
    "small_resnet_spec",
    "mlp_spec",
    "spec_to_dict",
    "spec_from_dict",
]

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Dense:
    out_features: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class ResBlock:
    """Two-conv residual block with relu output.

    stride 1 keeps the spatial size (identity or 1x1 shortcut); stride 2
    halves it using a 4x4/pad-1 main conv and a 2x2 shortcut conv, which keeps
    output sizes exactly integral on even inputs.
    """

    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


def _conv_out(size: int, kernel: int, stride: int, padding: int, where: str) -> int:
    padded = size + 2 * padding
    if kernel > padded:
        raise ValueError(f"{where}: kernel {kernel} exceeds padded size {padded}")
    if (padded - kernel) % stride != 0:
        raise ValueError(
            f"{where}: non-integral output for size {size}, kernel {kernel}, "
            f"stride {stride}, padding {padding}"
        )
    return (padded - kernel) // stride + 1


def _trace_shapes(layers, input_shape):
    """Propagate the activation shape through the chain, validating each step."""
    shapes = [tuple(input_shape)]
    cur = tuple(input_shape)
    for i, layer in enumerate(layers):
        where = f"layer {i} ({type(layer).__name__}) after {cur}"
        if isinstance(layer, Conv):
            if len(cur) != 3:
                raise ValueError(f"{where}: conv needs a [C,H,W] input")
            c, h, w = cur
            cur = (layer.out_channels, _conv_out(h, layer.kernel, layer.stride, layer.padding, where),
                   _conv_out(w, layer.kernel, layer.stride, layer.padding, where))
        elif isinstance(layer, ResBlock):
            if len(cur) != 3:
                raise ValueError(f"{where}: residual block needs a [C,H,W] input")
            c, h, w = cur
            if layer.stride == 1:
                cur = (layer.out_channels, h, w)
            elif layer.stride == 2:
                cur = (layer.out_channels, _conv_out(h, 4, 2, 1, where), _conv_out(w, 4, 2, 1, where))
            else:
                raise ValueError(f"{where}: residual block stride must be 1 or 2")
        elif isinstance(layer, Relu):
            pass
        elif isinstance(layer, GlobalAvgPool):
            if len(cur) != 3:
                raise ValueError(f"{where}: pooling needs a [C,H,W] input")
            cur = (cur[0],)
        elif isinstance(layer, Flatten):
            cur = (int(np.prod(cur)),)
        elif isinstance(layer, Dense):
            if len(cur) != 1:
                raise ValueError(f"{where}: dense needs a flat input, add Flatten or GlobalAvgPool")
            cur = (layer.out_features,)
        else:
            raise ValueError(f"{where}: unknown layer type")
        shapes.append(cur)
    return shapes


@dataclass(frozen=True)
class ModelSpec:
    """Layer topology plus the fixed per-channel input normalization."""

    layers: tuple
    input_shape: tuple  # (C, H, W)
    num_classes: int
    normalization: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))  # (mean, std)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        mean, std = self.normalization
        object.__setattr__(self, "normalization", (tuple(float(m) for m in mean),
                                                   tuple(float(s) for s in std)))
        mean, std = self.normalization
        if len(mean) != self.input_shape[0] or len(std) != self.input_shape[0]:
            raise ValueError("ModelSpec: normalization length must match input channels")
        if any(s <= 0 for s in std):
            raise ValueError("ModelSpec: normalization std must be positive")
        out = _trace_shapes(self.layers, self.input_shape)[-1]
        if out != (self.num_classes,):
            raise ValueError(f"ModelSpec: chain produces {out}, expected ({self.num_classes},) logits")

    def shapes(self):
        return _trace_shapes(self.layers, self.input_shape)


def _param_shapes(spec: ModelSpec) -> dict[str, tuple]:
    """Named parameter shapes in construction order."""
    out: dict[str, tuple] = {}
    shapes = spec.shapes()
    for i, layer in enumerate(spec.layers):
        cur = shapes[i]
        if isinstance(layer, Conv):
            out[f"layers.{i}.w"] = (layer.out_channels, cur[0], layer.kernel, layer.kernel)
            out[f"layers.{i}.b"] = (layer.out_channels,)
        elif isinstance(layer, Dense):
            out[f"layers.{i}.w"] = (cur[0], layer.out_features)
            out[f"layers.{i}.b"] = (layer.out_features,)
        elif isinstance(layer, ResBlock):
            c_in, oc = cur[0], layer.out_channels
            k1 = 4 if layer.stride == 2 else 3
            out[f"layers.{i}.conv1.w"] = (oc, c_in, k1, k1)
            out[f"layers.{i}.conv1.b"] = (oc,)
            out[f"layers.{i}.conv2.w"] = (oc, oc, 3, 3)
            out[f"layers.{i}.conv2.b"] = (oc,)
            if layer.stride == 2:
                out[f"layers.{i}.sc.w"] = (oc, c_in, 2, 2)
                out[f"layers.{i}.sc.b"] = (oc,)
            elif c_in != oc:
                out[f"layers.{i}.sc.w"] = (oc, c_in, 1, 1)
                out[f"layers.{i}.sc.b"] = (oc,)
    return out


def parameter_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(s)) for s in _param_shapes(spec).values())


class Model:
    """A spec plus named parameter tensors and a train/eval mode flag."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor], mode: str = "train"):
        self.spec = spec
        self.params = params
        self.mode = mode
        mean, std = spec.normalization
        std_arr = np.asarray(std, dtype=np.float64)
        self._norm_scale = Tensor(1.0 / std_arr)
        self._norm_shift = Tensor(-np.asarray(mean, dtype=np.float64) / std_arr)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_mode(self, mode: str) -> "Model":
        if mode not in ("train", "eval"):
            raise ValueError(f"set_mode: mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        return self

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Model(self.spec, params, mode=self.mode)

    def forward(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        expected = self.spec.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"forward: expected [N,{expected[0]},{expected[1]},{expected[2]}], got {x.shape}")
        h = T.channel_affine(x, self._norm_scale, self._norm_shift)
        for i, layer in enumerate(self.spec.layers):
            if isinstance(layer, Conv):
                h = T.bias_add(
                    T.conv2d(h, self.params[f"layers.{i}.w"], layer.stride, layer.padding),
                    self.params[f"layers.{i}.b"],
                )
            elif isinstance(layer, Dense):
                h = T.bias_add(T.matmul(h, self.params[f"layers.{i}.w"]), self.params[f"layers.{i}.b"])
            elif isinstance(layer, Relu):
                h = T.relu(h)
            elif isinstance(layer, ResBlock):
                h = self._res_forward(i, layer, h)
            elif isinstance(layer, GlobalAvgPool):
                h = T.reduce_mean(h, axis=(2, 3))
            elif isinstance(layer, Flatten):
                h = T.reshape(h, (h.shape[0], -1))
        return h

    def _res_forward(self, i: int, layer: ResBlock, h: Tensor) -> Tensor:
        p = self.params
        if layer.stride == 2:
            main = T.bias_add(T.conv2d(h, p[f"layers.{i}.conv1.w"], 2, 1), p[f"layers.{i}.conv1.b"])
        else:
            main = T.bias_add(T.conv2d(h, p[f"layers.{i}.conv1.w"], 1, 1), p[f"layers.{i}.conv1.b"])
        main = T.relu(main)
        main = T.bias_add(T.conv2d(main, p[f"layers.{i}.conv2.w"], 1, 1), p[f"layers.{i}.conv2.b"])
        if f"layers.{i}.sc.w" in p:
            stride = 2 if layer.stride == 2 else 1
            shortcut = T.bias_add(T.conv2d(h, p[f"layers.{i}.sc.w"], stride, 0), p[f"layers.{i}.sc.b"])
        else:
            shortcut = h
        return T.relu(T.add(main, shortcut))


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Initialize parameters with a fan-in-scaled uniform scheme.

    The draw order is the parameter construction order, so identical
    (spec, seed) pairs produce bitwise identical models.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    shapes = _param_shapes(spec)

    def fan_in_of(weight_shape):
        return weight_shape[0] if len(weight_shape) == 2 else int(np.prod(weight_shape[1:]))

    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        ref = shapes[name[:-2] + ".w"] if name.endswith(".b") else shape
        bound = 1.0 / sqrt(fan_in_of(ref))
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return Model(spec, params)


def model_forward(model, x) -> Tensor:
    """Forward pass producing [N,K] logits; the graph reaches back to x."""
    return model.forward(x if isinstance(x, Tensor) else Tensor(x))


def set_mode(model, mode: str):
    return model.set_mode(mode)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class OptimizerState:
    velocity: dict
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4


def init_optimizer(target, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4) -> OptimizerState:
    params = target.parameters() if hasattr(target, "parameters") else target
    velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
    return OptimizerState(velocity=velocity, lr=lr, momentum=momentum, weight_decay=weight_decay)


def sgd_step(target, grads: dict, state: OptimizerState) -> None:
    """v <- momentum*v + (g + wd*w); w <- w - lr*v, applied in place.

    ``grads`` must cover every parameter of the target.  The normalization
    head is not a parameter and is never touched.
    """
    params = target.parameters() if hasattr(target, "parameters") else target
    missing = [name for name in params if name not in grads or grads[name] is None]
    if missing:
        raise ValueError(f"sgd_step: missing gradients for {missing}")
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity[name]
        v *= state.momentum
        v += g
        p.data = p.data - state.lr * v


@dataclass
class LrSchedule:
    lr0: float
    eta_min: float = 0.0
    t_max: int = 1
    _warned: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.eta_min <= self.lr0:
            raise ValueError(f"LrSchedule: need 0 <= eta_min <= lr0, got {self.eta_min} vs {self.lr0}")
        if self.t_max < 1:
            raise ValueError(f"LrSchedule: t_max must be >= 1, got {self.t_max}")


def cosine_lr(t: int, sched: LrSchedule) -> float:
    """Cosine annealing: eta_min + (lr0 - eta_min) * (1 + cos(pi t / T)) / 2."""
    if t < 0:
        raise ValueError(f"cosine_lr: negative step {t}")
    if t > sched.t_max:
        if not sched._warned:
            logger.warning("cosine_lr: step %d beyond t_max=%d, clamping to eta_min", t, sched.t_max)
            sched._warned = True
        return sched.eta_min
    return sched.eta_min + 0.5 * (sched.lr0 - sched.eta_min) * (1.0 + cos(pi * t / sched.t_max))


# ---------------------------------------------------------------------------
# model utilities


def parameter_checksum(target) -> str:
    """Stable digest of all parameter names and values."""
    params = target.parameters() if hasattr(target, "parameters") else target
    h = hashlib.sha256()
    for name, p in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def small_resnet_spec(
    input_shape=(3, 32, 32),
    num_classes: int = 10,
    widths=(16, 32, 64),
    normalization=None,
) -> ModelSpec:
    """Small residual CNN: stem conv, two stride-2 residual blocks, pooled head.

    The default configuration lands near 100k parameters on 32x32 RGB input.
    """
    if normalization is None:
        normalization = (CIFAR10_MEAN, CIFAR10_STD) if input_shape[0] == 3 else None
    if normalization is None:
        c = input_shape[0]
        normalization = ((0.0,) * c, (1.0,) * c)
    w0, w1, w2 = widths
    layers = (
        Conv(w0, kernel=3, stride=1, padding=1),
        Relu(),
        ResBlock(w1, stride=2),
        ResBlock(w2, stride=2),
        GlobalAvgPool(),
        Dense(num_classes),
    )
    return ModelSpec(layers, input_shape, num_classes, normalization)


def mlp_spec(input_shape, hidden, num_classes: int, normalization=None) -> ModelSpec:
    """Flatten + dense stack with relu between layers (used by the gate)."""
    if normalization is None:
        c = input_shape[0]
        normalization = ((0.0,) * c, (1.0,) * c)
    layers: list = [Flatten()]
    for width in hidden:
        layers += [Dense(width), Relu()]
    layers.append(Dense(num_classes))
    return ModelSpec(tuple(layers), input_shape, num_classes, normalization)


# ---------------------------------------------------------------------------
# spec serialization (used by checkpoints and config files)

_LAYER_TYPES = {
    "conv": Conv,
    "dense": Dense,
    "relu": Relu,
    "resblock": ResBlock,
    "avgpool": GlobalAvgPool,
    "flatten": Flatten,
}
_LAYER_NAMES = {v: k for k, v in _LAYER_TYPES.items()}


def spec_to_dict(spec: ModelSpec) -> dict:
    layers = []
    for layer in spec.layers:
        entry = {"type": _LAYER_NAMES[type(layer)]}
        for f_name in getattr(layer, "__dataclass_fields__", {}):
            entry[f_name] = getattr(layer, f_name)
        layers.append(entry)
    return {
        "layers": layers,
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "normalization": {"mean": list(spec.normalization[0]), "std": list(spec.normalization[1])},
    }


def spec_from_dict(d: dict) -> ModelSpec:
    layers = []
    for entry in d["layers"]:
        kwargs = {k: v for k, v in entry.items() if k != "type"}
        try:
            cls = _LAYER_TYPES[entry["type"]]
        except KeyError:
            raise ValueError(f"spec_from_dict: unknown layer type {entry.get('type')!r}") from None
        layers.append(cls(**kwargs))
    norm = d.get("normalization")
    normalization = (tuple(norm["mean"]), tuple(norm["std"])) if norm else None
    if normalization is None:
        c = d["input_shape"][0]
        normalization = ((0.0,) * c, (1.0,) * c)
    return ModelSpec(tuple(layers), tuple(d["input_shape"]), d["num_classes"], normalization)
