"""Learned canonicalization for image classifiers under rotation and reflection groups."""

from canonkit.canon import CanonConfig, canonicalize, canonicalize_batch, direct_canonicalize
from canonkit.data import Dataset, augment_orbit, gen_shapes, load_idx, split, write_idx
from canonkit.harness import TrainConfig, evaluate, load_model, save_model, train
from canonkit.nets import NetSpec, init_params
from canonkit.symmetry import GroupElement, act_image, act_output, compose, inverse, make_group
from canonkit.tensor import Adam, Parameters, Tensor

__version__ = "0.1.0"

__all__ = [
    "Adam", "CanonConfig", "Dataset", "GroupElement", "NetSpec", "Parameters", "Tensor", "TrainConfig",
    "act_image", "act_output", "augment_orbit", "canonicalize", "canonicalize_batch", "compose",
    "direct_canonicalize", "evaluate", "gen_shapes", "init_params", "inverse", "load_idx", "load_model",
    "make_group", "save_model", "split", "train", "write_idx",
]
