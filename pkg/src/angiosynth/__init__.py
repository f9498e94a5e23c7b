"""Two-level conditional GAN for synthesizing angiograms from reflectance fundus images."""
from .errors import ConfigError, DivergenceError, RegistrationError
from .synthetic import ImagePair, SynthConfig, generate_dataset, generate_pair

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DivergenceError",
    "RegistrationError",
    "ImagePair",
    "SynthConfig",
    "generate_dataset",
    "generate_pair",
]
