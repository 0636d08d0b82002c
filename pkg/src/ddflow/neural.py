"""Small classifier networks with hand-written backpropagation and Adam.

The networks map a categorical part of the flow's active vector to logits for
another part: ``(B, *in_shape)`` class indices -> ``(B, *out_shape, K)``
logits.  Inputs are one-hot encoded, flattened for MLPs and kept as ``C*K``
channels (NHWC) for convolutional nets.

Parameter file layout (little-endian)::

    b"DDFN" | u16 version | u32 len | descriptor (UTF-8 JSON, len bytes)
    f32 parameters, in declaration order (per layer: weight, then bias)
"""

from __future__ import annotations

import json
import struct
from typing import Sequence

import numpy as np

NET_MAGIC = b"DDFN"
NET_VERSION = 1


class NetError(ValueError):
    pass


class NetFormatError(NetError):
    pass


class Dense:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, dtype=np.float32):
        self.n_in, self.n_out = n_in, n_out
        self.W = np.zeros((n_in, n_out), dtype=dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self._x = None

    @property
    def params(self):
        return [self.W, self.b]

    def config(self):
        return {"type": self.kind, "in": self.n_in, "out": self.n_out}

    def forward(self, x):
        self._x = x
        return x @ self.W + self.b

    def backward(self, g, need_dx=True):
        x = self._x
        grads = [x.T @ g, g.sum(axis=0)]
        return (g @ self.W.T if need_dx else None), grads


class Conv2d:
    """Stride-1 'same' convolution on NHWC tensors via shifted-slice im2col."""

    kind = "conv"

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, dtype=np.float32):
        if kernel % 2 != 1:
            raise NetError("kernel size must be odd")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.W = np.zeros((kernel * kernel * c_in, c_out), dtype=dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self._cols = None

    @property
    def params(self):
        return [self.W, self.b]

    def config(self):
        return {"type": self.kind, "in": self.c_in, "out": self.c_out, "kernel": self.kernel}

    def _im2col(self, x):
        k, p = self.kernel, self.kernel // 2
        if k == 1:
            return x
        _, h, w, _ = x.shape
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        return np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(k) for j in range(k)], axis=-1)

    def forward(self, x):
        cols = self._im2col(x)
        self._cols = cols
        b, h, w, _ = x.shape
        out = cols.reshape(b * h * w, -1) @ self.W + self.b
        return out.reshape(b, h, w, self.c_out)

    def backward(self, g, need_dx=True):
        cols = self._cols
        b, h, w, _ = g.shape
        g2 = g.reshape(b * h * w, self.c_out)
        grads = [cols.reshape(b * h * w, -1).T @ g2, g2.sum(axis=0)]
        if not need_dx:
            return None, grads
        dcols = (g2 @ self.W.T).reshape(b, h, w, -1)
        k, p, c = self.kernel, self.kernel // 2, self.c_in
        if k == 1:
            return dcols, grads
        dxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=dcols.dtype)
        for n, (i, j) in enumerate((i, j) for i in range(k) for j in range(k)):
            dxp[:, i:i + h, j:j + w, :] += dcols[..., n * c:(n + 1) * c]
        return dxp[:, p:p + h, p:p + w, :], grads


class ReLU:
    kind = "relu"
    params: list = []

    def __init__(self):
        self._mask = None

    def config(self):
        return {"type": self.kind}

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g, need_dx=True):
        return g * self._mask, []


def _layer_from_config(cfg, dtype):
    t = cfg["type"]
    if t == "dense":
        return Dense(cfg["in"], cfg["out"], dtype)
    if t == "conv":
        return Conv2d(cfg["in"], cfg["out"], cfg.get("kernel", 3), dtype)
    if t == "relu":
        return ReLU()
    raise NetFormatError(f"unknown layer type {t!r}")


class ClassifierNet:
    """Categorical part -> per-position logits over ``num_classes``.

    ``io`` is ``"dense"`` (flattened one-hot, for MLPs) or ``"conv"`` (one-hot
    channels, spatial shape shared by input and output parts).
    """

    def __init__(self, io, in_shape, out_shape, num_classes, layers, dtype=np.float32):
        self.io = io
        self.in_shape = tuple(int(s) for s in in_shape)
        self.out_shape = tuple(int(s) for s in out_shape)
        self.num_classes = int(num_classes)
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self._cached = False
        self._check_io()

    def _check_io(self):
        k = self.num_classes
        n_in, n_out = self._io_widths()
        dims = [l for l in self.layers if l.kind != "relu"]
        if not dims:
            raise NetError("network needs at least one parametric layer")
        first_in = dims[0].n_in if dims[0].kind == "dense" else dims[0].c_in
        last_out = dims[-1].n_out if dims[-1].kind == "dense" else dims[-1].c_out
        if first_in != n_in or last_out != n_out:
            raise NetError(
                f"layer widths {first_in}->{last_out} do not match io spec "
                f"{self.in_shape}->{self.out_shape} with K={k}"
            )
        if self.io == "conv" and (len(self.in_shape) != 3 or self.in_shape[1:] != self.out_shape[1:]):
            raise NetError("conv nets need (C, H, W) parts with equal spatial size")

    def _io_widths(self):
        k = self.num_classes
        if self.io == "dense":
            return int(np.prod(self.in_shape)) * k, int(np.prod(self.out_shape)) * k
        if self.io == "conv":
            return self.in_shape[0] * k, self.out_shape[0] * k
        raise NetError(f"unknown io kind {self.io!r}")

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def descriptor(self) -> dict:
        return {
            "io": self.io,
            "in_shape": list(self.in_shape),
            "out_shape": list(self.out_shape),
            "num_classes": self.num_classes,
            "layers": [l.config() for l in self.layers],
        }

    @classmethod
    def from_descriptor(cls, desc: dict, dtype=np.float32) -> "ClassifierNet":
        try:
            layers = [_layer_from_config(c, dtype) for c in desc["layers"]]
            return cls(desc["io"], desc["in_shape"], desc["out_shape"], desc["num_classes"], layers, dtype)
        except (KeyError, TypeError) as e:
            raise NetFormatError(f"malformed architecture descriptor: {e}") from e

    def copy(self) -> "ClassifierNet":
        net = ClassifierNet.from_descriptor(self.descriptor(), self.dtype)
        net.set_params([p.copy() for p in self.params])
        return net

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        params = self.params
        if len(values) != len(params):
            raise NetError("parameter count mismatch")
        for p, v in zip(params, values):
            if p.shape != np.shape(v):
                raise NetError(f"parameter shape mismatch {p.shape} vs {np.shape(v)}")
            p[...] = v

    def encode_input(self, part: np.ndarray) -> np.ndarray:
        part = np.asarray(part)
        if part.shape[1:] != self.in_shape:
            raise NetError(f"input part shape {part.shape[1:]} does not match {self.in_shape}")
        k = self.num_classes
        onehot = np.zeros((*part.shape, k), dtype=self.dtype)
        np.put_along_axis(onehot, part[..., None].astype(np.intp), 1, axis=-1)
        b = part.shape[0]
        if self.io == "dense":
            return onehot.reshape(b, -1)
        # (B, C, H, W, K) -> (B, H, W, C*K)
        return onehot.transpose(0, 2, 3, 1, 4).reshape(b, *self.in_shape[1:], -1)

    def forward_encoded(self, h: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            h = layer.forward(h)
        self._cached = True
        b, k = h.shape[0], self.num_classes
        if self.io == "dense":
            return h.reshape(b, *self.out_shape, k)
        c, hh, ww = self.out_shape
        return h.reshape(b, hh, ww, c, k).transpose(0, 3, 1, 2, 4)

    def forward(self, part: np.ndarray) -> np.ndarray:
        """Logits of shape ``(B, *out_shape, K)``; part is ``(B, *in_shape)``."""
        return self.forward_encoded(self.encode_input(part))

    def backward(self, grad_logits: np.ndarray, need_input_grad: bool = False):
        """Parameter gradients for the last forward pass.

        Returns ``(grads, dinput)`` where ``dinput`` is the gradient w.r.t. the
        encoded input (only when requested).
        """
        if not self._cached:
            raise NetError("backward called without a cached forward pass")
        g = np.asarray(grad_logits).astype(self.dtype, copy=False)
        b = g.shape[0]
        if self.io == "dense":
            g = g.reshape(b, -1)
        else:
            g = g.transpose(0, 2, 3, 1, 4)
            g = g.reshape(*g.shape[:3], -1)
        grads_per_layer = []
        for i, layer in enumerate(reversed(self.layers)):
            first = i == len(self.layers) - 1
            g, grads = layer.backward(g, need_dx=need_input_grad or not first)
            grads_per_layer.append(grads)
        grads = [gp for layer_grads in reversed(grads_per_layer) for gp in layer_grads]
        return grads, g


def build_classifier(arch: dict, in_shape, out_shape, num_classes: int, seed: int, dtype=np.float32) -> ClassifierNet:
    """Construct a freshly initialised network from an architecture dict.

    ``{"kind": "mlp", "hidden": [256, 256, 256]}`` gives a 4-linear-layer
    ReLU MLP; ``{"kind": "mlp", "hidden": []}`` is a single linear map (a
    lookup table over one-hot inputs); ``{"kind": "conv", "width": 32,
    "depth": 3, "kernel": 3}`` is a plain ReLU conv stack.  Hidden layers use
    He initialisation, the output layer starts at zero so a new coupling is
    the identity until trained.
    """
    k = num_classes
    kind = arch.get("kind", "mlp")
    if kind == "mlp":
        io = "dense"
        n_in, n_out = int(np.prod(in_shape)) * k, int(np.prod(out_shape)) * k
        widths = [n_in, *arch.get("hidden", [256, 256, 256]), n_out]
        make = lambda a, b: Dense(a, b, dtype)
    elif kind == "conv":
        io = "conv"
        depth, width, kernel = arch.get("depth", 3), arch.get("width", 32), arch.get("kernel", 3)
        if depth < 1:
            raise NetError("conv depth must be >= 1")
        widths = [in_shape[0] * k, *([width] * (depth - 1)), out_shape[0] * k]
        make = lambda a, b: Conv2d(a, b, kernel, dtype)
    else:
        raise NetError(f"unknown architecture kind {kind!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layer = make(a, b)
        if i < len(widths) - 2:
            fan_in = layer.W.shape[0]
            layer.W[...] = rng.standard_normal(layer.W.shape) * np.sqrt(2.0 / fan_in)
            layers += [layer, ReLU()]
        else:
            layers.append(layer)
    return ClassifierNet(io, in_shape, out_shape, k, layers, dtype)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted log-softmax over the last axis, computed in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood (nats) over all positions and its gradient."""
    logits = np.asarray(logits)
    target = np.asarray(target).astype(np.intp)
    if logits.shape[:-1] != target.shape:
        raise NetError(f"logit shape {logits.shape} does not match target shape {target.shape}")
    if target.size and (target.min() < 0 or target.max() >= logits.shape[-1]):
        raise NetError("target class out of range")
    logp = log_softmax(logits)
    n = target.size
    picked = np.take_along_axis(logp, target[..., None], axis=-1)
    loss = -float(picked.sum()) / n
    grad = np.exp(logp)
    np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], axis=-1) - 1.0, axis=-1)
    return loss, grad / n


class Adam:
    """Adam with bias correction; moments are kept per parameter array."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
            self.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
        if len(grads) != len(self.m):
            raise NetError("gradient list does not match optimizer state")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g, dtype=np.float64)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def backward_and_step(net: ClassifierNet, opt: Adam, grad_logits: np.ndarray) -> None:
    grads, _ = net.backward(grad_logits)
    opt.step(net.params, grads)


def net_to_bytes(net: ClassifierNet) -> bytes:
    desc = json.dumps(net.descriptor(), sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.params)
    return NET_MAGIC + struct.pack("<HI", NET_VERSION, len(desc)) + desc + body


def net_from_bytes(raw: bytes) -> ClassifierNet:
    if raw[:4] != NET_MAGIC:
        raise NetFormatError("bad network file magic")
    if len(raw) < 10:
        raise NetFormatError("truncated network header")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != NET_VERSION:
        raise NetFormatError(f"unsupported network file version {version}")
    try:
        desc = json.loads(raw[10:10 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise NetFormatError(f"corrupt architecture descriptor: {e}") from e
    net = ClassifierNet.from_descriptor(desc, np.float32)
    offset = 10 + n
    values = []
    for p in net.params:
        nbytes = 4 * p.size
        if offset + nbytes > len(raw):
            raise NetFormatError("truncated parameter block")
        values.append(np.frombuffer(raw, dtype="<f4", count=p.size, offset=offset).reshape(p.shape))
        offset += nbytes
    if offset != len(raw):
        raise NetFormatError("trailing bytes after parameter block")
    net.set_params(values)
    return net


def save_net(net: ClassifierNet, path) -> None:
    with open(path, "wb") as f:
        f.write(net_to_bytes(net))


def load_net(path) -> ClassifierNet:
    with open(path, "rb") as f:
        return net_from_bytes(f.read())
