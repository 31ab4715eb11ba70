"""Exception types raised across the package.

Each class maps to a CLI exit code through ``EXIT_CODES``.
"""


class DifflareError(Exception):
    """Base class for all package errors."""


class DimensionError(DifflareError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ParameterError(DifflareError, ValueError):
    """A scalar parameter is outside its documented range."""


class ConfigError(DifflareError, ValueError):
    """Run configuration is malformed, or model levels do not line up."""


class AssetError(DifflareError):
    """A flare/light asset is missing or undecodable."""


class CorpusError(DifflareError):
    """A corpus is empty or has the wrong layout."""


class TrainingError(DifflareError):
    """Training diverged (non-finite loss)."""


class SamplingError(DifflareError):
    """The reverse diffusion loop produced non-finite values."""


class DependencyError(DifflareError):
    """A stage was run before the stages it depends on."""


class IntegrityError(DifflareError):
    """Frozen weights changed, or an artifact hash does not match its manifest."""


EXIT_CODES = {
    ConfigError: 2,
    DependencyError: 3,
    IntegrityError: 3,
    TrainingError: 4,
    SamplingError: 4,
    AssetError: 5,
    CorpusError: 5,
}
