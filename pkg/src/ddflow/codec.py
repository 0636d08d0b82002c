"""Lossless coding of categorical grids under a trained flow.

Symbols are coded with a static-table rANS coder (32-bit state, byte-wise
renormalisation, 12-bit frequencies).  The final latent is coded under the
base tables and every factored part under the quantized softmax of its
splitprior network.  rANS is LIFO, so the encoder pushes parts in the
reverse of the order in which the decoder needs them:

    decode order: latent z, then factored parts from the last splitprior to
    the first (each part's logits depend only on what was decoded before).

Networks are run one sample at a time on both sides, which keeps the logits
(and therefore the frequency tables) bit-identical between compress and
decompress on the same machine.

Container layout (little-endian)::

    b"DDFC" | u16 version | 16-byte model hash prefix | u8 rank | u32 dims[rank]
    u32 crc32(original grid as u16) | u32 payload length | payload

Stream layout::

    b"DDFS" | u16 version | u64 count | u64 offsets[count + 1] | containers
"""

from __future__ import annotations

import bisect
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .flow import FlowModel, SplitPriorLayer
from .grid import CLASS_DTYPE, CategoricalGrid, Dataset, check_grids
from .likelihood import LOG2E, NotFittedError
from .neural import log_softmax

PREC = 12
TOTAL = 1 << PREC
RANS_L = 1 << 23
CONTAINER_MAGIC = b"DDFC"
STREAM_MAGIC = b"DDFS"
CODEC_VERSION = 1
HASH_BYTES = 16


class CodecError(ValueError):
    pass


# --- frequency tables -------------------------------------------------------

def quantize_rows(probs: np.ndarray) -> np.ndarray:
    """Largest-remainder quantization of each row to integers summing to 4096.

    Every symbol gets at least 1.  Remainders are ranked descending with ties
    to the lower index; symbols lifted to the floor of 1 are paid for by the
    symbols with the smallest remainders.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    k = p.shape[-1]
    if k > TOTAL:
        raise CodecError(f"alphabet of {k} symbols exceeds {TOTAL} frequency slots")
    if np.any(~np.isfinite(p)) or np.any(p <= 0):
        raise CodecError("probabilities must be finite and positive")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise CodecError("probabilities must sum to 1")
    raw = p * TOTAL
    freq = np.maximum(np.floor(raw).astype(np.int64), 1)
    rem = raw - freq
    deficit = TOTAL - freq.sum(axis=-1)
    rows = np.arange(len(p))[:, None]
    if np.any(deficit > 0):
        order = np.argsort(-rem, axis=-1, kind="stable")
        add = np.arange(k)[None, :] < np.maximum(deficit, 0)[:, None]
        freq[rows, order] += add
    while np.any(freq.sum(axis=-1) > TOTAL):
        excess = freq.sum(axis=-1) - TOTAL
        key = np.where(freq > 1, rem, np.inf)
        order = np.argsort(key, axis=-1, kind="stable")
        eligible = (freq > 1).sum(axis=-1)
        take = np.arange(k)[None, :] < np.minimum(np.maximum(excess, 0), eligible)[:, None]
        freq[rows, order] -= take
        rem = raw - freq
    return freq


def quantize(probs) -> "FrequencyTable":
    return FrequencyTable(quantize_rows(np.asarray(probs)[None])[0])


@dataclass(frozen=True)
class FrequencyTable:
    freq: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.freq, dtype=np.int64)
        if f.ndim != 1 or f.sum() != TOTAL or np.any(f < 1):
            raise CodecError("frequency table must be >= 1 everywhere and sum to 4096")
        object.__setattr__(self, "freq", f)

    @property
    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.freq)])


def probs_from_logits(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# --- rANS -------------------------------------------------------------------

class RansEncoder:
    """Pushes symbols onto a 32-bit rANS state; bytes come out in reverse."""

    def __init__(self):
        self.state = RANS_L
        self._out = bytearray()

    def put(self, start: int, freq: int) -> None:
        x = self.state
        x_max = ((RANS_L >> PREC) << 8) * freq
        while x >= x_max:
            self._out.append(x & 0xFF)
            x >>= 8
        self.state = ((x // freq) << PREC) + (x % freq) + start

    def finish(self) -> bytes:
        out = bytearray(self._out)
        x = self.state
        for _ in range(4):
            out.append(x & 0xFF)
            x >>= 8
        return bytes(reversed(out))


class RansDecoder:
    def __init__(self, payload: bytes):
        if len(payload) < 4:
            raise CodecError("rANS payload shorter than the state flush")
        self.data = payload
        self.state = int.from_bytes(payload[:4], "big")
        self.pos = 4
        if not RANS_L <= self.state < (RANS_L << 8):
            raise CodecError("rANS state outside the renormalisation interval")

    def peek(self) -> int:
        return self.state & (TOTAL - 1)

    def advance(self, start: int, freq: int) -> None:
        x = freq * (self.state >> PREC) + self.peek() - start
        data, pos = self.data, self.pos
        while x < RANS_L:
            if pos >= len(data):
                raise CodecError("rANS payload truncated")
            x = (x << 8) | data[pos]
            pos += 1
        self.state, self.pos = x, pos

    def check_finished(self) -> None:
        if self.state != RANS_L or self.pos != len(self.data):
            raise CodecError("rANS stream did not end in the initial state (corrupt payload)")


def _encode_symbols(enc: RansEncoder, symbols: np.ndarray, freq: np.ndarray) -> None:
    """Push ``symbols[i]`` under table ``freq[i]`` for i from last to first."""
    cum = np.concatenate([np.zeros((len(freq), 1), np.int64), np.cumsum(freq, axis=1)], axis=1)
    idx = np.arange(len(symbols))
    starts = cum[idx, symbols].tolist()
    fs = freq[idx, symbols].tolist()
    for i in range(len(fs) - 1, -1, -1):
        enc.put(starts[i], fs[i])


def _decode_symbols(dec: RansDecoder, freq: np.ndarray) -> np.ndarray:
    cum = np.concatenate([np.zeros((len(freq), 1), np.int64), np.cumsum(freq, axis=1)], axis=1).tolist()
    out = np.empty(len(freq), dtype=np.int64)
    for i, row in enumerate(cum):
        slot = dec.peek()
        s = bisect.bisect_right(row, slot) - 1
        dec.advance(row[s], row[s + 1] - row[s])
        out[i] = s
    return out


# --- containers ---------------------------------------------------------------

@dataclass(frozen=True)
class CompressedContainer:
    model_hash: bytes
    shape: tuple
    crc: int
    payload: bytes

    def to_bytes(self) -> bytes:
        head = CONTAINER_MAGIC + struct.pack("<H", CODEC_VERSION) + self.model_hash
        head += struct.pack(f"<B{len(self.shape)}I", len(self.shape), *self.shape)
        head += struct.pack("<II", self.crc, len(self.payload))
        return head + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CompressedContainer":
        if raw[:4] != CONTAINER_MAGIC:
            raise CodecError("bad container magic")
        pos = 4
        if len(raw) < pos + 2 + HASH_BYTES + 1:
            raise CodecError("truncated container header")
        (version,) = struct.unpack_from("<H", raw, pos)
        if version != CODEC_VERSION:
            raise CodecError(f"unsupported container version {version}")
        pos += 2
        model_hash = raw[pos:pos + HASH_BYTES]
        pos += HASH_BYTES
        rank = raw[pos]
        pos += 1
        if rank not in (1, 3) or len(raw) < pos + 4 * rank + 8:
            raise CodecError("bad or truncated container shape")
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        crc, n = struct.unpack_from("<II", raw, pos)
        pos += 8
        if len(raw) != pos + n:
            raise CodecError("container payload length mismatch")
        return cls(model_hash, tuple(shape), crc, raw[pos:])


def _hash_prefix(model: FlowModel) -> bytes:
    return bytes.fromhex(model.hash)[:HASH_BYTES]


def _crc(x: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(x, dtype="<u2").tobytes())


class Codec:
    """Compressor bound to one model; caches the model hash and base tables."""

    def __init__(self, model: FlowModel):
        if model.base is None:
            raise NotFittedError("model has no fitted base distribution")
        self.model = model
        self.hash = _hash_prefix(model)
        self.base_freq = quantize_rows(model.base.probs)

    def _split_freq(self, logits: np.ndarray) -> np.ndarray:
        return quantize_rows(probs_from_logits(logits).reshape(-1, self.model.num_classes))

    def compress(self, x) -> CompressedContainer:
        x = check_grids(x, self.model.num_classes, self.model.input_shape)
        if len(x) != 1:
            raise CodecError("compress takes exactly one grid")
        out = self.model.forward(x, batch_size=1)
        enc = RansEncoder()
        for part, logits in out.factored:
            _encode_symbols(enc, part.reshape(-1).astype(np.intp), self._split_freq(logits))
        _encode_symbols(enc, out.z.reshape(-1).astype(np.intp), self.base_freq)
        return CompressedContainer(self.hash, self.model.input_shape, _crc(x[0]), enc.finish())

    def decompress(self, container) -> CategoricalGrid:
        if isinstance(container, (bytes, bytearray)):
            container = CompressedContainer.from_bytes(bytes(container))
        model = self.model
        if container.model_hash != self.hash:
            raise CodecError("container was produced by a different model")
        if tuple(container.shape) != model.input_shape:
            raise CodecError(f"container shape {container.shape} does not match model input {model.input_shape}")
        dec = RansDecoder(container.payload)
        z = _decode_symbols(dec, self.base_freq).reshape(1, *model.output_shape).astype(CLASS_DTYPE)
        for layer in reversed(model.layers):
            if isinstance(layer, SplitPriorLayer):
                logits = layer.logits(z)
                part = _decode_symbols(dec, self._split_freq(logits))
                z = layer.inverse(z, part.reshape(logits.shape[:-1]).astype(CLASS_DTYPE))
            else:
                z = layer.inverse(z)
        dec.check_finished()
        if _crc(z[0]) != container.crc:
            raise CodecError("checksum mismatch after decoding (corrupt container)")
        return CategoricalGrid(z[0], model.num_classes)

    def ideal_code_length(self, x) -> float:
        """Unquantized code length in bits of one grid under the coding tables."""
        x = check_grids(x, self.model.num_classes, self.model.input_shape)
        out = self.model.forward(x, batch_size=1)
        nats = 0.0
        for part, logits in out.factored:
            logp = log_softmax(logits).reshape(-1, self.model.num_classes)
            nats -= logp[np.arange(part.size), part.reshape(-1).astype(np.intp)].sum()
        return float(self.model.base.bits(out.z)[0] + nats * LOG2E)


def compress(model: FlowModel, x) -> CompressedContainer:
    return Codec(model).compress(x)


def decompress(model: FlowModel, container) -> CategoricalGrid:
    return Codec(model).decompress(container)


# --- streams -------------------------------------------------------------------

def stream_encode(model: FlowModel, ds: Dataset) -> bytes:
    codec = Codec(model)
    blobs = [codec.compress(ds.values[i:i + 1]).to_bytes() for i in range(len(ds))]
    offsets = np.concatenate([[0], np.cumsum([len(b) for b in blobs], dtype=np.int64)])
    head = STREAM_MAGIC + struct.pack("<HQ", CODEC_VERSION, len(blobs)) + offsets.astype("<u8").tobytes()
    return head + b"".join(blobs)


def _stream_index(raw: bytes) -> tuple[np.ndarray, int]:
    if raw[:4] != STREAM_MAGIC:
        raise CodecError("bad stream magic")
    if len(raw) < 14:
        raise CodecError("truncated stream header")
    version, count = struct.unpack_from("<HQ", raw, 4)
    if version != CODEC_VERSION:
        raise CodecError(f"unsupported stream version {version}")
    base = 14 + 8 * (count + 1)
    if len(raw) < base:
        raise CodecError("truncated stream index")
    offsets = np.frombuffer(raw, dtype="<u8", count=count + 1, offset=14).astype(np.int64)
    if offsets[0] != 0 or np.any(np.diff(offsets) < 0) or base + offsets[-1] != len(raw):
        raise CodecError("stream index inconsistent with file size (truncated file?)")
    return offsets, base


def stream_decode(model: FlowModel, raw: bytes, index: int | None = None):
    """Decode every item (a :class:`Dataset`) or just item ``index``."""
    offsets, base = _stream_index(raw)
    count = len(offsets) - 1
    codec = Codec(model)

    def item(i):
        return codec.decompress(raw[base + offsets[i]:base + offsets[i + 1]])

    if index is not None:
        if not 0 <= index < count:
            raise IndexError(f"item {index} out of range for stream of {count}")
        return item(index)
    if count == 0:
        return Dataset.empty(model.input_shape, model.num_classes, "test")
    return Dataset.from_grids([item(i) for i in range(count)], "test")


def stream_compress(model: FlowModel, ds: Dataset, path) -> None:
    data = stream_encode(model, ds)
    with open(path, "wb") as f:
        f.write(data)


def stream_decompress(model: FlowModel, path, index: int | None = None):
    with open(path, "rb") as f:
        return stream_decode(model, f.read(), index)
