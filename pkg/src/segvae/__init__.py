"""Convolutional variational autoencoder for fixed-length speech segments.

The package covers the full pipeline: a DSP frontend (STFT magnitudes and
mel filterbanks in dB), a synthetic labeled corpus, a small reverse-mode
autodiff layer with the conv/batch-norm pieces the model needs, the VAE and
its deterministic autoencoder baseline, training with early stopping and
bit-reproducible resume, latent attribute representations with exact shift
arithmetic, probe classifiers for measuring modification, and diagnostics.
"""

from .errors import DataError, NumericalError, UsageError
from .features import (
    DB_FLOOR,
    FRAME_HOP,
    FRAME_LEN,
    KIND_FBANK,
    KIND_SPEC,
    N_MEL_FILTERS,
    N_SPEC_BINS,
    SAMPLE_RATE,
    FrameMatrix,
    Waveform,
    mel_filterbank,
    stft_magnitude_db,
)
from .latent import (
    AttributeTable,
    LatentShift,
    apply_shift,
    build_attribute_table,
    interpolate,
    make_shift,
    modify,
    reconstruct,
)
from .model import AeModel, ModelConfig, VaeModel, build_model, elbo_parts
from .rng import Rng
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AeModel",
    "AttributeTable",
    "DB_FLOOR",
    "DataError",
    "FRAME_HOP",
    "FRAME_LEN",
    "FrameMatrix",
    "KIND_FBANK",
    "KIND_SPEC",
    "LatentShift",
    "ModelConfig",
    "N_MEL_FILTERS",
    "N_SPEC_BINS",
    "NumericalError",
    "Rng",
    "SAMPLE_RATE",
    "TrainConfig",
    "UsageError",
    "VaeModel",
    "Waveform",
    "apply_shift",
    "build_attribute_table",
    "build_model",
    "elbo_parts",
    "interpolate",
    "make_shift",
    "mel_filterbank",
    "modify",
    "reconstruct",
    "stft_magnitude_db",
    "train",
    "__version__",
]
