"""Invertible layers over categorical arrays and the flow model container.

The encode direction (data ``x`` -> latent ``z``) of a coupling layer permutes
each class of the transformed part so that the classes the network predicts
as most likely are moved to the smallest occupied class values.

Model file layout (little-endian)::

    b"DDFM" | u16 version | u32 K | u8 rank | u32 dims[rank] | u32 n_layers
    per layer: u8 tag + payload
        shuffle     u32 n | u32 perm[n] | u64 seed
        squeeze     (empty)
        coupling    u32 d | u32 h | u64 len | network file (len bytes)
        splitprior  u8 factor (0: a, 1: b) | u32 d | u64 len | network file
    u8 has_base [| u32 D | u32 K | f64 alpha | f64 probs[D * K]]
"""

from __future__ import annotations

import hashlib
import struct
from typing import NamedTuple, Sequence

import numpy as np

from .grid import CLASS_DTYPE, check_grids
from .likelihood import BaseDistribution, NotFittedError
from .neural import ClassifierNet, log_softmax, net_from_bytes, net_to_bytes

MODEL_MAGIC = b"DDFM"
MODEL_VERSION = 1
DEFAULT_BATCH = 256


class FlowError(ValueError):
    pass


class ModelFormatError(FlowError):
    pass


def _top_h(theta: np.ndarray, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-h classes by descending theta (ties -> lower index) and their sorted slots."""
    theta = np.asarray(theta)
    k = theta.shape[-1]
    if not 1 <= h <= k:
        raise FlowError(f"h must lie in [1, {k}], got {h}")
    if np.isnan(theta).any():
        raise FlowError("NaN in logits")
    ranked = np.argsort(-theta, axis=-1, kind="stable")[..., :h]
    return ranked, np.sort(ranked, axis=-1)


def build_argsort_top(theta, h: int) -> np.ndarray:
    """Positional array ``r`` of a partial argsort over the top-h entries.

    The h largest entries are placed, in descending order, into the positions
    they jointly occupy; every other position holds its own index.
    """
    ranked, occupied = _top_h(np.asarray(theta, dtype=np.float64), h)
    r = np.arange(len(theta))
    r[occupied] = ranked
    return r


def encode_classes(x: np.ndarray, theta: np.ndarray, h: int) -> np.ndarray:
    """Apply the encode permutation elementwise; ``theta`` has one extra K axis."""
    ranked, occupied = _top_h(theta, h)
    x = np.asarray(x)
    match = ranked == x[..., None]
    hit = match.any(axis=-1)
    slot = np.take_along_axis(occupied, match.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    return np.where(hit, slot, x).astype(CLASS_DTYPE)


def decode_classes(z: np.ndarray, theta: np.ndarray, h: int) -> np.ndarray:
    ranked, occupied = _top_h(theta, h)
    z = np.asarray(z)
    match = occupied == z[..., None]
    hit = match.any(axis=-1)
    cls = np.take_along_axis(ranked, match.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    return np.where(hit, cls, z).astype(CLASS_DTYPE)


def encode_class(c: int, theta, h: int) -> int:
    return int(encode_classes(np.array(c), np.asarray(theta, dtype=np.float64), h))


def decode_class(c: int, theta, h: int) -> int:
    return int(decode_classes(np.array(c), np.asarray(theta, dtype=np.float64), h))


def _split_shapes(shape: Sequence[int], d: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    c, rest = shape[0], tuple(shape[1:])
    if not 0 < d < c:
        raise FlowError(f"split index {d} invalid for {c} channels")
    return (d, *rest), (c - d, *rest)


class ShuffleLayer:
    tag = 1

    def __init__(self, perm, seed: int | None = None):
        perm = np.asarray(perm, dtype=np.intp)
        if not np.array_equal(np.sort(perm), np.arange(len(perm))):
            raise FlowError("shuffle permutation is not a bijection")
        self.perm = perm
        self.inv = np.argsort(perm)
        self.seed = seed

    @classmethod
    def random(cls, n: int, seed: int) -> "ShuffleLayer":
        return cls(np.random.default_rng(seed).permutation(n), seed)

    def output_shape(self, shape):
        if shape[0] != len(self.perm):
            raise FlowError(f"shuffle over {len(self.perm)} channels applied to shape {shape}")
        return tuple(shape)

    def forward(self, x):
        return x[:, self.perm]

    def inverse(self, z):
        return z[:, self.inv]


class SqueezeLayer:
    """``(C, H, W) -> (4C, H/2, W/2)``; channel ``4c + q`` holds quadrant q (TL, TR, BL, BR)."""

    tag = 2

    def output_shape(self, shape):
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise FlowError(f"squeeze needs (C, H, W) with even H, W; got {shape}")
        c, h, w = shape
        return (4 * c, h // 2, w // 2)

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise FlowError(f"squeeze needs even H, W; got {h}x{w}")
        y = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
        return y.reshape(n, 4 * c, h // 2, w // 2)

    def inverse(self, z):
        n, c4, h2, w2 = z.shape
        c = c4 // 4
        y = z.reshape(n, c, 2, 2, h2, w2).transpose(0, 1, 4, 2, 5, 3)
        return y.reshape(n, c, 2 * h2, 2 * w2)


class CouplingLayer:
    """Keeps ``x[:, :d]`` and conditionally permutes the classes of ``x[:, d:]``."""

    tag = 3

    def __init__(self, net: ClassifierNet, d: int, h: int):
        self.net, self.d, self.h = net, int(d), int(h)
        if not 1 <= self.h <= net.num_classes:
            raise FlowError(f"h={h} outside [1, {net.num_classes}]")

    def output_shape(self, shape):
        a, b = _split_shapes(shape, self.d)
        if self.net.in_shape != a or self.net.out_shape != b:
            raise FlowError(f"coupling net {self.net.in_shape}->{self.net.out_shape} does not fit split {a}|{b}")
        return tuple(shape)

    def _theta(self, xa):
        return self.net.forward(xa)

    def forward(self, x):
        xa, xb = x[:, :self.d], x[:, self.d:]
        zb = encode_classes(xb, self._theta(xa), self.h)
        return np.concatenate([xa, zb], axis=1)

    def inverse(self, z):
        za, zb = z[:, :self.d], z[:, self.d:]
        xb = decode_classes(zb, self._theta(za), self.h)
        return np.concatenate([za, xb], axis=1)


class SplitPriorLayer:
    """Factors part ``a`` (``[:, :d]``) or part ``b`` out of the active vector.

    The factored part is modelled by a categorical whose logits the network
    computes from the part that stays active.
    """

    tag = 4

    def __init__(self, net: ClassifierNet, d: int, factor: str = "a"):
        if factor not in ("a", "b"):
            raise FlowError("factor must be 'a' or 'b'")
        self.net, self.d, self.factor = net, int(d), factor

    def _parts(self, shape):
        a, b = _split_shapes(shape, self.d)
        return (a, b) if self.factor == "a" else (b, a)

    def output_shape(self, shape):
        factored, kept = self._parts(shape)
        if self.net.in_shape != kept or self.net.out_shape != factored:
            raise FlowError(f"splitprior net {self.net.in_shape}->{self.net.out_shape} does not fit {kept}->{factored}")
        return kept

    def split(self, x):
        if self.factor == "a":
            return x[:, self.d:], x[:, :self.d]
        return x[:, :self.d], x[:, self.d:]

    def logits(self, kept):
        return self.net.forward(kept)

    def forward(self, x):
        kept, factored = self.split(x)
        return kept, factored, self.logits(kept)

    def inverse(self, kept, factored):
        parts = [factored, kept] if self.factor == "a" else [kept, factored]
        return np.concatenate(parts, axis=1)


class FlowOutput(NamedTuple):
    z: np.ndarray
    factored: list  # [(part, logits)], in layer order


class FlowModel:
    """Ordered layers plus the factorized base over the final latent."""

    def __init__(self, layers, num_classes: int, input_shape, base: BaseDistribution | None = None):
        self.layers = list(layers)
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.base = base
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))
        if base is not None and base.dim != int(np.prod(self.output_shape)):
            raise FlowError(f"base has {base.dim} dims but the flow emits {self.output_shape}")

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    @property
    def splitpriors(self) -> list[SplitPriorLayer]:
        return [l for l in self.layers if isinstance(l, SplitPriorLayer)]

    def with_base(self, base: BaseDistribution | None) -> "FlowModel":
        return FlowModel(self.layers, self.num_classes, self.input_shape, base)

    def append(self, layer) -> "FlowModel":
        return FlowModel([*self.layers, layer], self.num_classes, self.input_shape)

    def _forward_chunk(self, x):
        factored = []
        for layer in self.layers:
            if isinstance(layer, SplitPriorLayer):
                x, part, logits = layer.forward(x)
                factored.append((part, logits))
            else:
                x = layer.forward(x)
        return x, factored

    def forward(self, x, batch_size: int = DEFAULT_BATCH) -> FlowOutput:
        """Map data to the final latent, collecting factored parts and their logits.

        Networks are evaluated on chunks of ``batch_size`` samples; calling
        :meth:`inverse` with the same ``batch_size`` reproduces the logits bit
        for bit, which exact inversion relies on.
        """
        x = check_grids(x, self.num_classes, self.input_shape)
        zs, parts = [], []
        for start in range(0, max(len(x), 1), batch_size):
            z, f = self._forward_chunk(x[start:start + batch_size])
            zs.append(z)
            parts.append(f)
        factored = [
            (np.concatenate([p[j][0] for p in parts]), np.concatenate([p[j][1] for p in parts]))
            for j in range(len(parts[0]))
        ]
        return FlowOutput(np.concatenate(zs), factored)

    def _inverse_chunk(self, z, factored, rng=None):
        n_split = len(self.splitpriors)
        j = n_split
        for layer in reversed(self.layers):
            if isinstance(layer, SplitPriorLayer):
                j -= 1
                if factored is not None:
                    part = factored[j]
                else:
                    part = sample_categorical(layer.logits(z), rng)
                z = layer.inverse(z, part)
            else:
                z = layer.inverse(z)
        return z

    def inverse(self, z, factored: Sequence[np.ndarray] = (), batch_size: int = DEFAULT_BATCH) -> np.ndarray:
        z = np.asarray(z).astype(CLASS_DTYPE)
        factored = [np.asarray(f[0] if isinstance(f, tuple) else f).astype(CLASS_DTYPE) for f in factored]
        if len(factored) != len(self.splitpriors):
            raise FlowError(f"expected {len(self.splitpriors)} factored parts, got {len(factored)}")
        if z.shape[1:] != self.output_shape:
            raise FlowError(f"latent shape {z.shape[1:]} does not match {self.output_shape}")
        out = []
        for start in range(0, len(z), batch_size):
            sl = slice(start, start + batch_size)
            out.append(self._inverse_chunk(z[sl], [f[sl] for f in factored]))
        if not out:
            return np.zeros((0, *self.input_shape), dtype=CLASS_DTYPE)
        return np.concatenate(out)

    def sample(self, n: int, seed: int, batch_size: int = DEFAULT_BATCH) -> np.ndarray:
        """Draw ``n`` data samples: base latent, then splitprior parts during inversion."""
        if self.base is None:
            raise NotFittedError("model has no fitted base distribution")
        rng = np.random.default_rng(seed)
        out = []
        for start in range(0, n, batch_size):
            m = min(batch_size, n - start)
            z = self.base.sample(m, rng).reshape(m, *self.output_shape).astype(CLASS_DTYPE)
            out.append(self._inverse_chunk(z, None, rng))
        return np.concatenate(out)

    def to_bytes(self) -> bytes:
        return model_to_bytes(self)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FlowModel":
        with open(path, "rb") as f:
            return model_from_bytes(f.read())


def sample_categorical(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    p = np.exp(log_softmax(logits))
    cum = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1])
    return np.minimum((u[..., None] >= cum).sum(axis=-1), p.shape[-1] - 1).astype(CLASS_DTYPE)


def model_to_bytes(model: FlowModel) -> bytes:
    shape = model.input_shape
    out = [MODEL_MAGIC, struct.pack("<HIB", MODEL_VERSION, model.num_classes, len(shape))]
    out.append(struct.pack(f"<{len(shape)}I", *shape))
    out.append(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        out.append(struct.pack("<B", layer.tag))
        if isinstance(layer, ShuffleLayer):
            out.append(struct.pack("<I", len(layer.perm)))
            out.append(layer.perm.astype("<u4").tobytes())
            out.append(struct.pack("<Q", layer.seed if layer.seed is not None else 0))
        elif isinstance(layer, CouplingLayer):
            net = net_to_bytes(layer.net)
            out.append(struct.pack("<IIQ", layer.d, layer.h, len(net)) + net)
        elif isinstance(layer, SplitPriorLayer):
            net = net_to_bytes(layer.net)
            out.append(struct.pack("<BIQ", 0 if layer.factor == "a" else 1, layer.d, len(net)) + net)
    if model.base is None:
        out.append(struct.pack("<B", 0))
    else:
        b = model.base
        out.append(struct.pack("<BIId", 1, b.dim, b.num_classes, b.alpha))
        out.append(b.probs.astype("<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise ModelFormatError(f"truncated model file at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ModelFormatError(f"truncated model file at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk


def model_from_bytes(raw: bytes) -> FlowModel:
    if raw[:4] != MODEL_MAGIC:
        raise ModelFormatError("bad model file magic")
    r = _Reader(raw)
    r.pos = 4
    version, k, rank = r.take("<HIB")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model file version {version}")
    shape = r.take(f"<{rank}I")
    (n_layers,) = r.take("<I")
    layers = []
    for _ in range(n_layers):
        (tag,) = r.take("<B")
        if tag == ShuffleLayer.tag:
            (n,) = r.take("<I")
            perm = np.frombuffer(r.bytes(4 * n), dtype="<u4")
            (seed,) = r.take("<Q")
            layers.append(ShuffleLayer(perm, seed))
        elif tag == SqueezeLayer.tag:
            layers.append(SqueezeLayer())
        elif tag == CouplingLayer.tag:
            d, h, n = r.take("<IIQ")
            layers.append(CouplingLayer(net_from_bytes(r.bytes(n)), d, h))
        elif tag == SplitPriorLayer.tag:
            factor, d, n = r.take("<BIQ")
            layers.append(SplitPriorLayer(net_from_bytes(r.bytes(n)), d, "ab"[factor]))
        else:
            raise ModelFormatError(f"unknown layer tag {tag} at byte {r.pos - 1}")
    (has_base,) = r.take("<B")
    base = None
    if has_base:
        dim, kk, alpha = r.take("<IId")
        probs = np.frombuffer(r.bytes(8 * dim * kk), dtype="<f8").reshape(dim, kk)
        base = BaseDistribution(probs.copy(), alpha)
    if r.pos != len(raw):
        raise ModelFormatError("trailing bytes after model payload")
    try:
        return FlowModel(layers, k, shape, base)
    except FlowError as e:
        raise ModelFormatError(f"inconsistent model file: {e}") from e
