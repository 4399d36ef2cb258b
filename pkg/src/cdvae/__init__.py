"""Cross-domain VAE voice conversion with adversarial refinement.

Feature archives in, feature archives out: the package covers the synthetic
two-factor corpus, the four-stream cross-domain VAE, the Wasserstein critic
and speaker-classifier objectives, phase-wise training, spectral conversion,
and the objective evaluation suite (MCD, MSD, GV ratio, latent DEM).
"""

__version__ = "0.1.0"

from .errors import CdvaeError
from .featureio import (
    Domain,
    FeatureSequence,
    load_archive,
    load_manifest,
    save_archive,
    save_manifest,
)
from .modes import Mode
from .networks import ArchConfig, ModelBundle, build_bundle
from .objectives import LossWeights
from .synthetic import SynthConfig, generate_synthetic_corpus
from .training import TrainConfig, checkpoint, init_state, prepare_training_data, restore, train

__all__ = [
    "ArchConfig",
    "CdvaeError",
    "Domain",
    "FeatureSequence",
    "LossWeights",
    "Mode",
    "ModelBundle",
    "SynthConfig",
    "TrainConfig",
    "__version__",
    "build_bundle",
    "checkpoint",
    "generate_synthetic_corpus",
    "init_state",
    "load_archive",
    "load_manifest",
    "prepare_training_data",
    "restore",
    "save_archive",
    "save_manifest",
    "train",
]
