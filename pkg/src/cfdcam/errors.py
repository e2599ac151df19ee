"""Exception types shared across the toolkit."""


class CfdCamError(Exception):
    """Base class for toolkit errors."""


class ValidationError(CfdCamError, ValueError):
    """Input violated a documented precondition."""


class InputSpecError(ValidationError):
    """Image does not match the classifier's input specification."""


class LayerRegistryError(CfdCamError, KeyError):
    """Requested layer is not in the handle's layer registry."""


class FormatError(CfdCamError, ValueError):
    """On-disk artifact is malformed (volume, checkpoint, saliency file)."""


class ConfigError(CfdCamError, ValueError):
    """Run configuration failed schema validation."""
