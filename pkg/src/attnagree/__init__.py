"""attnagree: multimodal volume+tabular classifier with test-time-augmentation
uncertainty, transformer relevance maps, reader-agreement scoring, and
agreement-informed uncertainty estimators."""

__version__ = "0.1.0"

from .backend import BACKEND_NAME

__all__ = ["BACKEND_NAME", "__version__"]
