"""Discrete denoising flows for categorical data.

Greedy layer-wise training of conditional-permutation coupling layers, exact
bits-per-dimension evaluation, sampling and an rANS codec driven by the model.
"""

from .codec import Codec, CodecError, compress, decompress, stream_compress, stream_decompress
from .datasets import load_dataset, load_grids, load_idx, sample_eight_gaussians, sample_synthetic_maps, save_grids
from .estimator import DiscreteDenoisingFlow
from .flow import CouplingLayer, FlowModel, ShuffleLayer, SplitPriorLayer, SqueezeLayer, build_argsort_top
from .grid import CategoricalGrid, Dataset
from .likelihood import BpdReport, evaluate_bpd, fit_base
from .train import FlowSpec, TrainReport, train_model

__version__ = "0.1.0"

__all__ = [
    "BpdReport",
    "CategoricalGrid",
    "Codec",
    "CodecError",
    "CouplingLayer",
    "Dataset",
    "DiscreteDenoisingFlow",
    "FlowModel",
    "FlowSpec",
    "ShuffleLayer",
    "SplitPriorLayer",
    "SqueezeLayer",
    "TrainReport",
    "build_argsort_top",
    "compress",
    "decompress",
    "evaluate_bpd",
    "fit_base",
    "load_dataset",
    "load_grids",
    "load_idx",
    "sample_eight_gaussians",
    "sample_synthetic_maps",
    "save_grids",
    "stream_compress",
    "stream_decompress",
    "train_model",
]
