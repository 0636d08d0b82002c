"""Greedy layer-wise training of denoising flows.

Each trainable block is fitted against data already pushed through every
previously frozen layer, then frozen and appended.  Since the prefix never
changes while a layer trains, the transformed data are computed once per
layer instead of once per batch; the result is identical.

FlowSpec files are JSON::

    {"k": 91, "shape": [2], "lr": 0.001, "batch": 64, "epochs": 20,
     "patience": 3, "seed": 0,
     "blocks": [{"type": "coupling", "h": 91,
                 "net": {"kind": "mlp", "hidden": [256, 256, 256]}}]}

Block types: ``squeeze``, ``shuffle`` (optional ``seed``), ``coupling``
(``h``, ``net``), ``splitprior`` (``net``, optional ``factor``).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .flow import CouplingLayer, FlowModel, ShuffleLayer, SplitPriorLayer, SqueezeLayer
from .grid import Dataset, GridError
from .likelihood import LOG2E, categorical_log_prob, evaluate_bpd, fit_base
from .neural import Adam, ClassifierNet, build_classifier, cross_entropy_loss

logger = logging.getLogger(__name__)

BLOCK_TYPES = ("squeeze", "shuffle", "coupling", "splitprior")


class SpecError(ValueError):
    pass


@dataclass
class FlowSpec:
    num_classes: int
    input_shape: tuple
    blocks: list
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    patience: int = 3
    seed: int = 0
    valid_fraction: float = 0.1
    alpha: float = 1.0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.blocks = [dict(b) for b in self.blocks]
        self.validate()

    @classmethod
    def from_dict(cls, cfg: dict) -> "FlowSpec":
        known = {"k", "shape", "blocks", "lr", "batch", "epochs", "patience", "seed", "valid_fraction", "alpha"}
        unknown = set(cfg) - known
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        try:
            return cls(
                num_classes=int(cfg["k"]),
                input_shape=tuple(cfg["shape"]),
                blocks=list(cfg.get("blocks", [])),
                lr=float(cfg.get("lr", 1e-3)),
                batch_size=int(cfg.get("batch", 64)),
                epochs=int(cfg.get("epochs", 20)),
                patience=int(cfg.get("patience", 3)),
                seed=int(cfg.get("seed", 0)),
                valid_fraction=float(cfg.get("valid_fraction", 0.1)),
                alpha=float(cfg.get("alpha", 1.0)),
            )
        except KeyError as e:
            raise SpecError(f"missing spec key {e}") from e

    @classmethod
    def from_json(cls, path) -> "FlowSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {
            "k": self.num_classes, "shape": list(self.input_shape), "blocks": self.blocks,
            "lr": self.lr, "batch": self.batch_size, "epochs": self.epochs,
            "patience": self.patience, "seed": self.seed,
            "valid_fraction": self.valid_fraction, "alpha": self.alpha,
        }

    def validate(self) -> list[tuple]:
        """Check the shape chain; returns ``(block, in_shape, out_shape, d)`` per block."""
        if self.num_classes < 1:
            raise SpecError("k must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 0:
            raise SpecError("batch and epochs must be positive, patience non-negative")
        shape = self.input_shape
        if len(shape) not in (1, 3) or min(shape) < 1:
            raise SpecError(f"shape must be (D,) or (C, H, W), got {shape}")
        plan = []
        for i, block in enumerate(self.blocks):
            t = block.get("type")
            if t not in BLOCK_TYPES:
                raise SpecError(f"block {i}: unknown type {t!r}")
            d = None
            out = shape
            if t == "squeeze":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise SpecError(f"block {i}: squeeze needs (C, H, W) with even H, W; got {shape}")
                out = (4 * shape[0], shape[1] // 2, shape[2] // 2)
            elif t in ("coupling", "splitprior"):
                if shape[0] < 2:
                    raise SpecError(f"block {i}: {t} needs at least 2 channels, got {shape}")
                d = shape[0] // 2
                kind = block.get("net", {}).get("kind", "mlp")
                if kind == "conv" and len(shape) != 3:
                    raise SpecError(f"block {i}: conv nets need (C, H, W) data")
                if t == "coupling":
                    h = int(block.get("h", self.num_classes))
                    if not 1 <= h <= self.num_classes:
                        raise SpecError(f"block {i}: h={h} outside [1, {self.num_classes}]")
                else:
                    factor = block.get("factor", "a")
                    if factor not in ("a", "b"):
                        raise SpecError(f"block {i}: factor must be 'a' or 'b'")
                    out = (shape[0] - d, *shape[1:]) if factor == "a" else (d, *shape[1:])
            plan.append((block, shape, out, d))
            shape = out
        return plan


class EarlyStopping:
    """Tracks the best validation loss; stops after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.epoch = -1

    def update(self, loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch = loss, self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


@dataclass
class LayerReport:
    layer: int
    kind: str
    train_nats: list = field(default_factory=list)
    valid_nats: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0
    train_bpd: float = float("nan")
    valid_bpd: float = float("nan")


@dataclass
class TrainReport:
    layers: list = field(default_factory=list)
    seconds: float = 0.0
    initial_train_bpd: float = float("nan")
    initial_valid_bpd: float = float("nan")
    final_train_bpd: float = float("nan")
    final_valid_bpd: float = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "layer", "train_nats", "valid_nats"])
        for rep in self.layers:
            for e, (t, v) in enumerate(zip(rep.train_nats, rep.valid_nats)):
                w.writerow([e, rep.layer, repr(t), repr(v)])
        return buf.getvalue()


def _mean_loss(net: ClassifierNet, inputs, targets, batch_size: int = 256) -> float:
    total, n = 0.0, 0
    for s in range(0, len(inputs), batch_size):
        loss, _ = cross_entropy_loss(net.forward(inputs[s:s + batch_size]), targets[s:s + batch_size])
        m = targets[s:s + batch_size].size
        total += loss * m
        n += m
    return total / n


def fit_classifier(
    net: ClassifierNet,
    inputs: np.ndarray,
    targets: np.ndarray,
    valid_inputs: np.ndarray,
    valid_targets: np.ndarray,
    *,
    lr: float = 1e-3,
    batch_size: int = 64,
    epochs: int = 20,
    patience: int = 3,
    seed: int = 0,
    report: LayerReport | None = None,
) -> ClassifierNet:
    """Minimise mean cross-entropy; returns a copy holding the best-validation weights."""
    if len(inputs) == 0 or len(valid_inputs) == 0:
        raise GridError("training and validation data must be non-empty")
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    stop = EarlyStopping(patience)
    best = net.copy()
    report = report if report is not None else LayerReport(-1, "net")
    for epoch in range(epochs):
        order = rng.permutation(len(inputs))
        total, count = 0.0, 0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            loss, grad = cross_entropy_loss(net.forward(inputs[idx]), targets[idx])
            grads, _ = net.backward(grad)
            opt.step(net.params, grads)
            total += loss * len(idx)
            count += len(idx)
        valid = _mean_loss(net, valid_inputs, valid_targets)
        report.train_nats.append(total / count)
        report.valid_nats.append(valid)
        halt = stop.update(valid)
        if stop.improved:
            best = net.copy()
        logger.info("layer %d epoch %d train %.5f valid %.5f nats", report.layer, epoch, total / count, valid)
        if halt:
            break
    report.best_epoch = stop.best_epoch
    return best


def _split_bits_per_sample(layer: SplitPriorLayer, kept, factored, batch_size=256):
    out = [categorical_log_prob(layer.logits(kept[s:s + batch_size]), factored[s:s + batch_size])
           for s in range(0, len(kept), batch_size)]
    return -np.concatenate(out) * LOG2E


def _apply(layer, x, batch_size=256):
    """Push an active-vector array through one frozen layer (chunked like FlowModel)."""
    if isinstance(layer, SplitPriorLayer):
        kept, factored = layer.split(x)
        return kept, factored
    out = [layer.forward(x[s:s + batch_size]) for s in range(0, len(x), batch_size)]
    return np.concatenate(out), None


def _prefix_bpd(active, split_bits, num_classes, alpha, base_data, dim):
    base = fit_base(base_data, num_classes, alpha)
    bits = base.bits(active) + split_bits
    return float(bits.mean() / dim)


def _make_net(block, in_shape, out_shape, k, seed):
    return build_classifier(block.get("net", {"kind": "mlp"}), in_shape, out_shape, k, seed)


def optimize_layer(model: FlowModel, block: dict, train: Dataset, valid: Dataset, spec: FlowSpec, seed: int = 0):
    """Train one new coupling or splitprior net on data transformed by ``model``.

    Returns ``(layer, LayerReport)``; ``model`` itself is not modified.
    """
    if len(train) == 0 or len(valid) == 0:
        raise GridError("training and validation data must be non-empty")
    zt = model.forward(train).z
    zv = model.forward(valid).z
    return _train_block(block, zt, zv, spec, len(model.layers), seed)


def _train_block(block, zt, zv, spec: FlowSpec, index: int, seed: int):
    k = spec.num_classes
    shape = zt.shape[1:]
    d = shape[0] // 2
    report = LayerReport(index, block["type"])
    t0 = time.perf_counter()
    if block["type"] == "coupling":
        a, b = (d, *shape[1:]), (shape[0] - d, *shape[1:])
        net = _make_net(block, a, b, k, seed)
        inputs, targets, vin, vtg = zt[:, :d], zt[:, d:], zv[:, :d], zv[:, d:]
        layer_factory = lambda n: CouplingLayer(n, d, int(block.get("h", k)))
    else:
        factor = block.get("factor", "a")
        if factor == "a":
            kept_t, fac_t, kept_v, fac_v = zt[:, d:], zt[:, :d], zv[:, d:], zv[:, :d]
        else:
            kept_t, fac_t, kept_v, fac_v = zt[:, :d], zt[:, d:], zv[:, :d], zv[:, d:]
        net = _make_net(block, kept_t.shape[1:], fac_t.shape[1:], k, seed)
        inputs, targets, vin, vtg = kept_t, fac_t, kept_v, fac_v
        layer_factory = lambda n: SplitPriorLayer(n, d, factor)
    net = fit_classifier(
        net, inputs, targets, vin, vtg,
        lr=spec.lr, batch_size=spec.batch_size, epochs=spec.epochs,
        patience=spec.patience, seed=seed + 1, report=report,
    )
    report.seconds = time.perf_counter() - t0
    return layer_factory(net), report


def train_model(spec: FlowSpec, data: Dataset, valid: Dataset | None = None) -> tuple[FlowModel, TrainReport]:
    """Build and train the flow described by ``spec``, one layer at a time."""
    plan = spec.validate()
    if len(data) == 0:
        raise GridError("training data is empty")
    if data.num_classes != spec.num_classes or data.shape != spec.input_shape:
        raise SpecError(f"data (K={data.num_classes}, shape={data.shape}) does not match spec")
    if valid is None:
        data, valid = data.train_valid_split(spec.valid_fraction, spec.seed)
    t_start = time.perf_counter()
    k, dim = spec.num_classes, int(np.prod(spec.input_shape))
    model = FlowModel([], k, spec.input_shape)
    report = TrainReport()
    act_t, act_v = data.values, valid.values
    bits_t, bits_v = np.zeros(len(act_t)), np.zeros(len(act_v))
    report.initial_train_bpd = _prefix_bpd(act_t, bits_t, k, spec.alpha, act_t, dim)
    report.initial_valid_bpd = _prefix_bpd(act_v, bits_v, k, spec.alpha, act_t, dim)
    for i, (block, in_shape, _, _) in enumerate(plan):
        t = block["type"]
        seed = spec.seed * 1_000_003 + 7919 * (i + 1)
        if t == "squeeze":
            layer, rep = SqueezeLayer(), None
        elif t == "shuffle":
            layer, rep = ShuffleLayer.random(in_shape[0], int(block.get("seed", seed))), None
        else:
            layer, rep = _train_block(block, act_t, act_v, spec, i, seed)
        model = model.append(layer)
        act_t, fac_t = _apply(layer, act_t)
        act_v, fac_v = _apply(layer, act_v)
        if isinstance(layer, SplitPriorLayer):
            bits_t = bits_t + _split_bits_per_sample(layer, act_t, fac_t)
            bits_v = bits_v + _split_bits_per_sample(layer, act_v, fac_v)
        if rep is not None:
            rep.train_bpd = _prefix_bpd(act_t, bits_t, k, spec.alpha, act_t, dim)
            rep.valid_bpd = _prefix_bpd(act_v, bits_v, k, spec.alpha, act_t, dim)
            report.layers.append(rep)
            logger.info("appended %s layer %d: train %.4f valid %.4f bpd (%.1fs)",
                        t, i, rep.train_bpd, rep.valid_bpd, rep.seconds)
    model = model.with_base(fit_base(act_t, k, spec.alpha))
    report.final_train_bpd = evaluate_bpd(model, data).mean_bpd
    report.final_valid_bpd = evaluate_bpd(model, valid).mean_bpd
    report.seconds = time.perf_counter() - t_start
    return model, report
