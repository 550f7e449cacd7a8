"""A small CNN engine with hand-written backpropagation.

Layers keep whatever they need from the last ``forward`` call to run
``backward``; a model is therefore owned by one caller at a time. All math is
float64.

Spatial activations between layers are channel-major, (C, B, H, W), so that
convolutions are a patch copy plus one GEMM with no transposes. ``Model``
accepts and returns the usual (B, C, H, W) layout at its boundary. Pooling to
features (global average pool, flatten) switches to (B, F).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import conv
from .errors import NumericError, ShapeError
from .tucker import Tucker2Factors, check_conv_weight, decompose, recover


class Layer:
    """Base layer. ``params`` are trainable; ``buffers`` are saved but not trained."""

    kind = "layer"

    def __init__(self, name: str = ""):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {}

    def output_shape(self, in_shape: tuple) -> tuple:
        """Per-sample output shape, (C, H, W) or (F,), for a per-sample input shape."""
        return in_shape

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray, need_params: bool = True) -> np.ndarray:
        """Input gradient; also fills ``self.grads`` unless ``need_params`` is false."""
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({self.name!r}{', ' if shapes else ''}{shapes})"


def _conv_out_shape(name, in_shape, in_ch, k, stride, padding, out_ch):
    if len(in_shape) != 3 or in_shape[0] != in_ch:
        raise ShapeError(f"layer {name}: expects ({in_ch}, H, W) input, got {in_shape}")
    ho = conv.out_size(in_shape[1], k, stride, padding)
    wo = conv.out_size(in_shape[2], k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"layer {name}: kernel {k} does not fit input {in_shape}")
    return (out_ch, ho, wo)


def _spatial(name, x, channels):
    if x.ndim != 4 or x.shape[0] != channels:
        raise ShapeError(f"layer {name}: expects channel-major input with {channels} channels, "
                         f"got {x.shape}")


class ConvDense(Layer):
    kind = "conv"

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None, stride: int = 1,
                 padding: int = 0, name: str = ""):
        super().__init__(name)
        o, _, _ = check_conv_weight(weight)
        self.params["weight"] = np.asarray(weight, dtype=np.float64)
        self.params["bias"] = np.zeros(o) if bias is None else np.asarray(bias, dtype=np.float64)
        self.stride, self.padding = stride, padding

    def config(self):
        return {"stride": self.stride, "padding": self.padding}

    @property
    def weight_shape(self):
        return self.params["weight"].shape

    def dense_weight(self) -> np.ndarray:
        return self.params["weight"]

    def output_shape(self, in_shape):
        o, i, k, _ = self.weight_shape
        return _conv_out_shape(self.name, in_shape, i, k, self.stride, self.padding, o)

    def forward(self, x, train):
        w = self.params["weight"]
        _spatial(self.name, x, w.shape[1])
        out, self._cols = conv.conv2d_cm(x, w, self.stride, self.padding, self.params["bias"])
        self._x_shape = x.shape
        return out

    def backward(self, dout, need_params=True):
        w = self.params["weight"]
        if not need_params:
            return conv.input_grad_cm(dout, self._x_shape, w, self.stride, self.padding)
        dx, dw = conv.conv2d_cm_backward(dout, self._cols, self._x_shape, w, self.stride, self.padding)
        self.grads = {"weight": dw, "bias": dout.sum(axis=(1, 2, 3))}
        return dx


class ConvFactorized(Layer):
    """Tucker-2 conv: 1x1 reduce by u2^T, KxK core conv, 1x1 expand by u1."""

    kind = "conv_tucker2"

    def __init__(self, factors: Tucker2Factors, bias: np.ndarray | None = None, stride: int = 1,
                 padding: int = 0, name: str = ""):
        super().__init__(name)
        o = factors.u1.shape[0]
        self.params["u1"] = np.asarray(factors.u1, dtype=np.float64)
        self.params["u2"] = np.asarray(factors.u2, dtype=np.float64)
        self.params["g"] = np.asarray(factors.g, dtype=np.float64)
        self.params["bias"] = np.zeros(o) if bias is None else np.asarray(bias, dtype=np.float64)
        self.stride, self.padding = stride, padding

    def config(self):
        return {"stride": self.stride, "padding": self.padding}

    @property
    def factors(self) -> Tucker2Factors:
        return Tucker2Factors(self.params["u1"], self.params["u2"], self.params["g"])

    @property
    def ranks(self) -> tuple[int, int]:
        return tuple(self.params["g"].shape[:2])

    @property
    def weight_shape(self):
        return self.factors.weight_shape

    def dense_weight(self) -> np.ndarray:
        return recover(self.factors)

    def output_shape(self, in_shape):
        o, i, k, _ = self.weight_shape
        return _conv_out_shape(self.name, in_shape, i, k, self.stride, self.padding, o)

    def forward(self, x, train):
        u1, u2, g = self.params["u1"], self.params["u2"], self.params["g"]
        _spatial(self.name, x, u2.shape[0])
        self._x = x
        self._t1 = conv.channel_mix_cm(x, u2.T)
        self._t2, self._cols = conv.conv2d_cm(self._t1, g, self.stride, self.padding)
        y = conv.channel_mix_cm(self._t2, u1)
        y += self.params["bias"][:, None, None, None]
        return y

    def backward(self, dout, need_params=True):
        u1, u2, g = self.params["u1"], self.params["u2"], self.params["g"]
        dt2 = conv.channel_mix_cm(dout, u1.T)
        if not need_params:
            dt1 = conv.input_grad_cm(dt2, self._t1.shape, g, self.stride, self.padding)
            return conv.channel_mix_cm(dt1, u2)
        du1 = dout.reshape(dout.shape[0], -1) @ self._t2.reshape(self._t2.shape[0], -1).T
        dt1, dg = conv.conv2d_cm_backward(dt2, self._cols, self._t1.shape, g, self.stride, self.padding)
        du2 = self._x.reshape(self._x.shape[0], -1) @ dt1.reshape(dt1.shape[0], -1).T
        self.grads = {"u1": du1, "u2": du2, "g": dg, "bias": dout.sum(axis=(1, 2, 3))}
        return conv.channel_mix_cm(dt1, u2)


class Linear(Layer):
    kind = "linear"

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None, name: str = ""):
        super().__init__(name)
        if weight.ndim != 2:
            raise ShapeError(f"linear weight must be 2-D, got {weight.shape}")
        self.params["weight"] = np.asarray(weight, dtype=np.float64)
        self.params["bias"] = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)

    def output_shape(self, in_shape):
        if in_shape != (self.params["weight"].shape[1],):
            raise ShapeError(f"layer {self.name}: expects ({self.params['weight'].shape[1]},), got {in_shape}")
        return (self.params["weight"].shape[0],)

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.params["weight"].shape[1]:
            raise ShapeError(f"layer {self.name}: input {x.shape} does not match weight "
                             f"{self.params['weight'].shape}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, dout, need_params=True):
        if need_params:
            self.grads = {"weight": dout.T @ self._x, "bias": dout.sum(axis=0)}
        return dout @ self.params["weight"]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout, need_params=True):
        return dout * self._mask


class MaxPool(Layer):
    """Max pooling; gradient goes to the first maximal entry of each window."""

    kind = "maxpool"

    def __init__(self, window: int = 2, stride: int | None = None, name: str = ""):
        super().__init__(name)
        self.window = window
        self.stride = window if stride is None else stride

    def config(self):
        return {"window": self.window, "stride": self.stride}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"layer {self.name}: expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        ho, wo = conv.out_size(h, self.window, self.stride, 0), conv.out_size(w, self.window, self.stride, 0)
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {self.name}: window {self.window} does not fit {in_shape}")
        return (c, ho, wo)

    def _slices(self, ho, wo):
        k, s = self.window, self.stride
        return [(i, j, np.s_[:, :, i:i + s * ho:s, j:j + s * wo:s]) for i in range(k) for j in range(k)]

    def forward(self, x, train):
        k, s = self.window, self.stride
        ho, wo = conv.out_size(x.shape[2], k, s, 0), conv.out_size(x.shape[3], k, s, 0)
        out = None
        arg = np.zeros(x.shape[:2] + (ho, wo), dtype=np.intp)
        for n, (_, _, sl) in enumerate(self._slices(ho, wo)):
            v = x[sl]
            if out is None:
                out = v.copy()
                continue
            better = v > out
            out = np.where(better, v, out)
            arg[better] = n
        self._arg, self._x_shape = arg, x.shape
        return out

    def backward(self, dout, need_params=True):
        ho, wo = dout.shape[2:]
        dx = np.zeros(self._x_shape)
        for n, (_, _, sl) in enumerate(self._slices(ho, wo)):
            dx[sl] += np.where(self._arg == n, dout, 0.0)
        return dx


class AvgPoolGlobal(Layer):
    """Channel-major (C, B, H, W) -> features (B, C)."""

    kind = "avgpool_global"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"layer {self.name}: expects (C, H, W), got {in_shape}")
        return (in_shape[0],)

    def forward(self, x, train):
        self._x_shape = x.shape
        return x.mean(axis=(2, 3)).T

    def backward(self, dout, need_params=True):
        c, b, h, w = self._x_shape
        return np.broadcast_to(dout.T[:, :, None, None] / (h * w), self._x_shape).copy()


class Flatten(Layer):
    """Channel-major (C, B, H, W) -> features (B, C*H*W) in (C, H, W) order."""

    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train):
        self._x_shape = x.shape
        return conv.to_nchw(x).reshape(x.shape[1], -1)

    def backward(self, dout, need_params=True):
        c, b, h, w = self._x_shape
        return conv.to_cm(dout.reshape(b, c, h, w))


class BatchNorm(Layer):
    """Per-channel batch norm over (B, H, W). Never compressed."""

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, name: str = ""):
        super().__init__(name)
        self.params["scale"] = np.ones(channels)
        self.params["shift"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def config(self):
        return {"momentum": self.momentum, "eps": self.eps}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.params["scale"].shape[0]:
            raise ShapeError(f"layer {self.name}: expects ({self.params['scale'].shape[0]}, H, W), got {in_shape}")
        return in_shape

    def forward(self, x, train):
        _spatial(self.name, x, self.params["scale"].shape[0])
        c = x.shape[0]
        flat = x.reshape(c, -1)
        if train:
            mean = flat.mean(axis=1)
            centered = flat - mean[:, None]
            var = np.einsum("ij,ij->i", centered, centered) / flat.shape[1]
            n = flat.shape[1]
            m = self.momentum
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var * n / max(n - 1, 1)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
            centered = flat - mean[:, None]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv[:, None]
        self._xhat, self._inv, self._train = xhat, inv, train
        return (xhat * self.params["scale"][:, None] + self.params["shift"][:, None]).reshape(x.shape)

    def backward(self, dout, need_params=True):
        c = dout.shape[0]
        d = dout.reshape(c, -1)
        xhat, inv = self._xhat, self._inv
        if need_params:
            self.grads = {"scale": np.einsum("ij,ij->i", d, xhat), "shift": d.sum(axis=1)}
        dxhat = d * self.params["scale"][:, None]
        if not self._train:
            return (dxhat * inv[:, None]).reshape(dout.shape)
        n = d.shape[1]
        s1 = dxhat.sum(axis=1)[:, None]
        s2 = np.einsum("ij,ij->i", dxhat, xhat)[:, None]
        return ((inv[:, None] / n) * (n * dxhat - s1 - xhat * s2)).reshape(dout.shape)


CONV_KINDS = (ConvDense, ConvFactorized)


class Model:
    """An ordered chain of layers ending in class logits."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple, num_classes: int,
                 compressible: Sequence[str] = ()):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.compressible = list(compressible)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names) or any(not n for n in names):
            raise ValueError(f"layer names must be unique and non-empty, got {names}")
        for n in self.compressible:
            if not isinstance(self.layer(n), CONV_KINDS):
                raise ValueError(f"compressible layer {n} is not a convolution")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (num_classes,):
            raise ShapeError(f"model output shape {shape} does not match {num_classes} classes")

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index(self, name: str) -> int:
        return [layer.name for layer in self.layers].index(name)

    def replace(self, name: str, new: Layer) -> None:
        new.name = name
        self.layers[self.index(name)] = new

    def parameters(self) -> Iterator[tuple[str, str, np.ndarray]]:
        for layer in self.layers:
            for pname, p in layer.params.items():
                yield layer.name, pname, p

    def param_count(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    @property
    def factorized(self) -> bool:
        return any(isinstance(self.layer(n), ConvFactorized) for n in self.compressible)

    def conv_weights(self) -> dict[str, np.ndarray]:
        """Dense (or recovered) weights of the compressible layers."""
        return {n: self.layer(n).dense_weight() for n in self.compressible}

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def forward(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if x.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"model expects input (B, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        train = mode == "train"
        if x.ndim == 4:
            x = conv.to_cm(x)
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout: np.ndarray, need_params: bool = True) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout, need_params)
        return conv.to_nchw(dout) if dout.ndim == 4 else dout

    def grads(self) -> dict[str, dict[str, np.ndarray]]:
        return {layer.name: dict(layer.grads) for layer in self.layers if layer.params}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -logp[np.arange(b), y].mean()
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    d = np.exp(logp)
    d[np.arange(b), y] -= 1.0
    return float(loss), d / b


def loss_and_grad(model: Model, x: np.ndarray, y: np.ndarray, mode: str = "train",
                  need_params: bool = True
                  ) -> tuple[float, dict[str, dict[str, np.ndarray]], np.ndarray]:
    """Forward, cross-entropy, backward. Returns (loss, param grads, input grad).

    With ``need_params=False`` only the input gradient is computed and the
    returned parameter-gradient dict is empty.
    """
    logits = model.forward(x, mode)
    if y.shape != (x.shape[0],) or y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError(f"labels must be {x.shape[0]} ints in [0, {model.num_classes})")
    loss, dlogits = cross_entropy(logits, y)
    dx = model.backward(dlogits, need_params)
    return loss, (model.grads() if need_params else {}), dx


def sgd_step(model: Model, grads: dict, lr: float, extra: dict | None = None) -> Model:
    """In-place ``p -= lr * (grad + extra)``. ``extra`` maps layer -> param -> array."""
    for lname, pname, p in model.parameters():
        g = grads.get(lname, {}).get(pname)
        if g is None:
            continue
        e = (extra or {}).get(lname, {}).get(pname)
        step = g if e is None else g + e
        if step.shape != p.shape:
            raise ShapeError(f"gradient {step.shape} does not match {lname}.{pname} {p.shape}")
        p -= lr * step
    return model


class SGD:
    """SGD with optional heavy-ball momentum and L2 weight decay."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[tuple[str, str], np.ndarray] = {}

    def step(self, model: Model, grads: dict, lr: float, extra: dict | None = None) -> None:
        for lname, pname, p in model.parameters():
            g = grads.get(lname, {}).get(pname)
            if g is None:
                continue
            e = (extra or {}).get(lname, {}).get(pname)
            if e is not None:
                g = g + e
            if self.weight_decay:
                g = g + self.weight_decay * p
            if g.shape != p.shape:
                raise ShapeError(f"gradient {g.shape} does not match {lname}.{pname} {p.shape}")
            if self.momentum:
                v = self.velocity.get((lname, pname))
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[(lname, pname)] = v
                g = v
            p -= lr * g


def step_decay(base_lr: float, epoch: int, total_epochs: int,
               milestones: Sequence[float] = (0.25, 0.5, 0.75), factor: float = 0.1) -> float:
    """Learning rate divided by 10 at each passed fraction of the run."""
    passed = sum(epoch >= int(m * total_epochs) for m in milestones)
    return base_lr * factor ** passed


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 3
    image_size: int = 16
    num_classes: int = 10
    stem_width: int = 16
    widths: tuple[int, ...] = (32, 64, 128)
    kernel_size: int = 3
    batch_norm: bool = True


def mini_conv_net(arch: Architecture = Architecture(), rng: np.random.Generator | None = None) -> Model:
    """Stem conv, then conv-BN-ReLU-maxpool blocks, global average pool, linear head.

    The block convolutions are the compressible layers; the stem is not.
    """
    if not 1 <= len(arch.widths) <= 4:
        raise ValueError(f"MiniConvNet takes 1 to 4 blocks, got {len(arch.widths)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    k, pad = arch.kernel_size, arch.kernel_size // 2
    layers: list[Layer] = []

    def conv_bn_relu(prefix, cin, cout):
        w = he_uniform(rng, (cout, cin, k, k), cin * k * k)
        layers.append(ConvDense(w, None, 1, pad, name=f"{prefix}.conv"))
        if arch.batch_norm:
            layers.append(BatchNorm(cout, name=f"{prefix}.bn"))
        layers.append(ReLU(name=f"{prefix}.relu"))

    conv_bn_relu("stem", arch.in_channels, arch.stem_width)
    cin = arch.stem_width
    compressible = []
    for b, cout in enumerate(arch.widths, start=1):
        conv_bn_relu(f"block{b}", cin, cout)
        layers.append(MaxPool(2, name=f"block{b}.pool"))
        compressible.append(f"block{b}.conv")
        cin = cout
    layers.append(AvgPoolGlobal(name="gap"))
    fc = he_uniform(rng, (arch.num_classes, cin), cin)
    layers.append(Linear(fc, None, name="fc"))
    return Model(layers, (arch.in_channels, arch.image_size, arch.image_size), arch.num_classes,
                 compressible)


def factorize(model: Model, ranks: dict[str, tuple[int, int]]) -> Model:
    """Copy of ``model`` with each named dense conv replaced by its Tucker-2 factors."""
    out = model.clone()
    for name, (r1, r2) in ranks.items():
        layer = out.layer(name)
        if not isinstance(layer, ConvDense):
            raise ValueError(f"layer {name} is not a dense convolution")
        f = decompose(layer.params["weight"], r1, r2)
        out.replace(name, ConvFactorized(f, layer.params["bias"].copy(), layer.stride, layer.padding))
    return out
