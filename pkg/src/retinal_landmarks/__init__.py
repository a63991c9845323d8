"""Optic disc detection/validation and fovea localization for colour fundus images."""

from retinal_landmarks.errors import InvalidInputError, FitError

__version__ = "0.1.0"

__all__ = ["InvalidInputError", "FitError", "__version__"]
