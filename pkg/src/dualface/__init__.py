"""Identity-guided face synthesis from contour conditions with a frozen style generator."""

from .config import AblationFlags, ConfigError, ExperimentConfig, ScaleProfile, get_profile, load_config
from .encoder import LatentBundle, MainEncoder
from .generator import StyleGenerator
from .identity import IdentityEmbedder, IdentityEncoder
from .trainer import Trainer, build_models, evaluate, prepare_frozen, refine, run_ablation, train

__version__ = "0.1.0"
