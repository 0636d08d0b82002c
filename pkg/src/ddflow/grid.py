"""Categorical grid containers and input validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

CLASS_DTYPE = np.uint16
SPLITS = ("train", "valid", "test")


class GridError(ValueError):
    """Raised when an array violates the categorical grid invariants."""


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) not in (1, 3):
        raise GridError(f"grid shape must be (D,) or (C, H, W), got {shape}")
    if any(s <= 0 for s in shape):
        raise GridError(f"grid dimensions must be positive, got {shape}")
    return shape


def _check_values(values: np.ndarray, num_classes: int) -> np.ndarray:
    values = np.asarray(values)
    if values.dtype.kind not in "iub":
        if values.dtype.kind == "f" and np.all(np.isfinite(values)) and np.all(values == np.round(values)):
            values = values.astype(np.int64)
        else:
            raise GridError(f"class values must be integers, got dtype {values.dtype}")
    if values.size and (values.min() < 0 or values.max() >= num_classes):
        raise GridError(
            f"class values must lie in [0, {num_classes}), got range "
            f"[{values.min()}, {values.max()}]"
        )
    return values.astype(CLASS_DTYPE, copy=False)


@dataclass(frozen=True)
class CategoricalGrid:
    """A single array of class indices in ``{0, ..., K-1}``."""

    values: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 1 or self.num_classes > np.iinfo(CLASS_DTYPE).max + 1:
            raise GridError(f"num_classes out of range: {self.num_classes}")
        _check_shape(np.shape(self.values))
        values = _check_values(self.values, self.num_classes)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, CategoricalGrid):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    """Homogeneous stack of grids, stored as one ``(N, *shape)`` array.

    An empty dataset is permitted so that decoders can return one; every
    consumer that needs samples (training, saving) rejects it.
    """

    values: np.ndarray
    num_classes: int
    split: str = "train"
    shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim < 2:
            raise GridError("dataset values must have shape (N, *grid_shape)")
        shape = _check_shape(values.shape[1:])
        if self.split not in SPLITS:
            raise GridError(f"unknown split tag {self.split!r}")
        if self.num_classes < 1:
            raise GridError(f"num_classes must be positive, got {self.num_classes}")
        values = _check_values(values, self.num_classes)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def from_grids(cls, grids: Sequence[CategoricalGrid], split: str = "train") -> "Dataset":
        if not grids:
            raise GridError("cannot infer shape from an empty grid list")
        ks = {g.num_classes for g in grids}
        shapes = {g.shape for g in grids}
        if len(ks) != 1 or len(shapes) != 1:
            raise GridError("grids must share shape and num_classes")
        return cls(np.stack([g.values for g in grids]), ks.pop(), split)

    @classmethod
    def empty(cls, shape: Sequence[int], num_classes: int, split: str = "train") -> "Dataset":
        return cls(np.zeros((0, *_check_shape(shape)), dtype=CLASS_DTYPE), num_classes, split)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i) -> CategoricalGrid | "Dataset":
        if isinstance(i, (int, np.integer)):
            return CategoricalGrid(self.values[i], self.num_classes)
        return Dataset(self.values[i], self.num_classes, self.split)

    def __iter__(self) -> Iterator[CategoricalGrid]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def with_split(self, split: str) -> "Dataset":
        return Dataset(self.values, self.num_classes, split)

    def train_valid_split(self, valid_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Random seeded split; the validation part gets ``ceil(fraction * N)`` items."""
        n = len(self)
        n_valid = int(np.ceil(valid_fraction * n))
        if n < 2 or not 0 < n_valid < n:
            raise GridError(f"cannot split {n} items with valid_fraction={valid_fraction}")
        order = np.random.default_rng(seed).permutation(n)
        valid, train = order[:n_valid], order[n_valid:]
        return (
            Dataset(self.values[np.sort(train)], self.num_classes, "train"),
            Dataset(self.values[np.sort(valid)], self.num_classes, "valid"),
        )


def check_grids(X, num_classes: int | None = None, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate grid input and return it as a ``(N, *shape)`` class array.

    Accepts a :class:`Dataset`, a single :class:`CategoricalGrid` (promoted
    to a batch of one) or any integer array-like.
    """
    if isinstance(X, Dataset):
        if num_classes is not None and X.num_classes != num_classes:
            raise GridError(f"dataset has K={X.num_classes}, expected {num_classes}")
        values = X.values
    elif isinstance(X, CategoricalGrid):
        if num_classes is not None and X.num_classes != num_classes:
            raise GridError(f"grid has K={X.num_classes}, expected {num_classes}")
        values = X.values[None]
    else:
        values = np.asarray(X)
        if values.ndim < 2:
            raise GridError(f"expected a batch of grids, got array of shape {values.shape}")
        if num_classes is None:
            num_classes = int(values.max()) + 1 if values.size else 1
        values = _check_values(values, num_classes)
    if shape is not None and tuple(values.shape[1:]) != tuple(shape):
        raise GridError(f"grid shape {tuple(values.shape[1:])} does not match expected {tuple(shape)}")
    return values
