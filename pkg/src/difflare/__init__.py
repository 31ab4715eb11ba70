"""Local lens-flare removal with a latent diffusion prior, at desk scale."""
from .config import RunConfig, ci_profile, load as load_config, resolve
from .errors import DifflareError, EXIT_CODES

__version__ = "0.1.0"

__all__ = ["RunConfig", "ci_profile", "load_config", "resolve", "DifflareError", "EXIT_CODES", "__version__"]
