"""Factorized base distribution, exact bits-per-dimension, 2x2 oracles.

Everything is computed in nats internally; :data:`LOG2E` converts to bits at
the reporting boundary (:class:`BpdReport`).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .grid import check_grids
from .neural import log_softmax

LOG2E = 1.0 / np.log(2.0)


class NotFittedError(RuntimeError):
    pass


@dataclass(frozen=True)
class BaseDistribution:
    """Independent categorical per dimension of the flattened final latent."""

    probs: np.ndarray  # (D_final, K)
    alpha: float = 1.0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValueError("base table must be (D, K)")
        if np.any(probs <= 0) or not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("base rows must be strictly positive and sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def dim(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def log_prob(self, z: np.ndarray) -> np.ndarray:
        """Per-sample log-likelihood in nats for ``z`` of shape ``(N, ...)``."""
        flat = self._flat(z)
        return np.log(self.probs)[np.arange(self.dim), flat].sum(axis=1)

    def bits(self, z: np.ndarray) -> np.ndarray:
        """Per-sample code length in bits; summed from log2 terms so dyadic tables are exact."""
        return -np.log2(self.probs)[np.arange(self.dim), self._flat(z)].sum(axis=1)

    def _flat(self, z):
        flat = np.asarray(z).reshape(len(z), -1).astype(np.intp)
        if flat.shape[1] != self.dim:
            raise ValueError(f"latent has {flat.shape[1]} dims, base has {self.dim}")
        return flat

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random((n, self.dim))
        cum = np.cumsum(self.probs, axis=1)
        return np.minimum((u[..., None] >= cum).sum(axis=-1), self.num_classes - 1)


def fit_base(z, num_classes: int, alpha: float = 1.0) -> BaseDistribution:
    """Laplace-smoothed counts: ``p[d, k] = (count + alpha) / (N + alpha K)``."""
    z = np.asarray(z)
    if len(z) == 0:
        raise ValueError("cannot fit a base distribution to zero samples")
    flat = z.reshape(len(z), -1).astype(np.intp)
    d = flat.shape[1]
    counts = np.zeros((d, num_classes), dtype=np.float64)
    np.add.at(counts, (np.broadcast_to(np.arange(d), flat.shape), flat), 1.0)
    probs = (counts + alpha) / (len(z) + alpha * num_classes)
    return BaseDistribution(probs, alpha)


def categorical_log_prob(logits: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Per-sample summed log-softmax(logits)[values], ``values`` is ``(N, ...)``."""
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, np.asarray(values).astype(np.intp)[..., None], axis=-1)
    return picked.reshape(len(values), -1).sum(axis=1)


@dataclass
class BpdReport:
    mean_bpd: float
    per_sample: np.ndarray
    base_bits: np.ndarray
    split_bits: list[np.ndarray] = field(default_factory=list)
    dim: int = 1

    @property
    def total_bits(self) -> np.ndarray:
        return self.per_sample * self.dim

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "bpd", "base_bits", *[f"split{i}_bits" for i in range(len(self.split_bits))]])
        for i, v in enumerate(self.per_sample):
            w.writerow([i, repr(float(v)), repr(float(self.base_bits[i])), *[repr(float(s[i])) for s in self.split_bits]])
        return buf.getvalue()


def sample_log_likelihood(model, x, batch_size: int = 256) -> tuple[np.ndarray, list[np.ndarray]]:
    """Base and splitprior log-likelihood terms (nats) per sample."""
    if model.base is None:
        raise NotFittedError("model has no fitted base distribution")
    x = check_grids(x, model.num_classes, model.input_shape)
    base_terms, split_terms = [], []
    for start in range(0, len(x), batch_size):
        out = model.forward(x[start:start + batch_size], batch_size=batch_size)
        base_terms.append(model.base.log_prob(out.z))
        split_terms.append([categorical_log_prob(logits, part) for part, logits in out.factored])
    base = np.concatenate(base_terms) if base_terms else np.zeros(0)
    splits = [np.concatenate([s[j] for s in split_terms]) for j in range(len(split_terms[0]))] if split_terms else []
    return base, splits


def evaluate_bpd(model, data, batch_size: int = 256) -> BpdReport:
    """Exact bits per input dimension; permutation layers cost nothing."""
    if model.base is None:
        raise NotFittedError("model has no fitted base distribution")
    x = check_grids(data, model.num_classes, model.input_shape)
    base_bits, split_bits = [], []
    for start in range(0, len(x), batch_size):
        out = model.forward(x[start:start + batch_size], batch_size=batch_size)
        base_bits.append(model.base.bits(out.z))
        split_bits.append([-categorical_log_prob(logits, part) * LOG2E for part, logits in out.factored])
    n_split = len(model.splitpriors)
    base = np.concatenate(base_bits) if base_bits else np.zeros(0)
    splits = [np.concatenate([s[j] for s in split_bits]) if split_bits else np.zeros(0) for j in range(n_split)]
    dim = int(np.prod(model.input_shape))
    per_sample = (base + sum(splits, np.zeros_like(base))) / dim
    return BpdReport(float(per_sample.mean()) if len(per_sample) else float("nan"), per_sample, base, splits, dim)


def empirical_marginal_entropy(data, num_classes: int) -> float:
    """Mean per-dimension entropy (bits) of the empirical marginals."""
    flat = np.asarray(data).reshape(len(data), -1).astype(np.intp)
    counts = np.zeros((flat.shape[1], num_classes))
    np.add.at(counts, (np.broadcast_to(np.arange(flat.shape[1]), flat.shape), flat), 1.0)
    p = counts / len(flat)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log2(p), 0.0).sum(axis=1)
    return float(h.mean())


def _check_joint(joint) -> np.ndarray:
    j = np.asarray(joint, dtype=np.float64)
    if j.shape[-2:] != (2, 2):
        raise ValueError(f"expected 2x2 probability tables, got shape {j.shape}")
    if np.any(j < 0) or not np.allclose(j.sum(axis=(-2, -1)), 1.0, rtol=0, atol=1e-9):
        raise ValueError("probability tables must be non-negative and sum to 1")
    return j


def binary_entropy(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(p < 1, (1 - p) * np.log2(1 - p), 0.0))
    return h


def optimal_factorized_bits(joint):
    """Expected code length (bits) of the best product-of-Bernoullis model.

    Rows index the first variable, columns the second; the optimal marginals
    are the row-0 mass and the column-0 mass.  Accepts a single table or a
    stack of shape ``(..., 2, 2)``.
    """
    j = _check_joint(joint)
    bits = binary_entropy(j[..., 0, :].sum(axis=-1)) + binary_entropy(j[..., :, 0].sum(axis=-1))
    return float(bits) if bits.ndim == 0 else bits


def denoise_binary_joint(joint) -> np.ndarray:
    """Distribution after a perfect-argmax binary coupling: each row sorted descending."""
    j = _check_joint(joint)
    return -np.sort(-j, axis=-1)
