"""Multi-identity routed conditioning for a small video diffusion transformer."""

from .errors import MultiIDError

__version__ = "0.1.0"
__all__ = ["MultiIDError", "__version__"]
