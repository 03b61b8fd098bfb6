"""Contrastive pre-training of spherical location encoders against frozen image features."""

from __future__ import annotations

from .autodiff import Adam, Linear, Tape, Tensor, cosine_similarity, finite_difference_check
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .data import Dataset, SyntheticSpec, generate_synthetic, minibatches, stratified_sample
from .errors import (
    ConfigError,
    DegenerateInputError,
    FileFormatError,
    GeoCSPError,
    NumericError,
    ShapeError,
    UsageError,
)
from .estimators import CSPEncoder, GeoPriorClassifier, LinearProbeClassifier, PresenceAbsenceClassifier
from .location import GeoLocation, LocationEncoder, PositionalEncodingConfig, uniform_sphere_sample
from .objectives import ContrastiveConfig, PairSet, mc_loss, nce_loss
from .supervised import combine_posteriors, evaluate_top1, location_posterior, image_posterior

__version__ = "0.1.0"
