"""Exercise recommendation: mastery prediction, difficulty filtering and diversity-aware re-ranking."""

__version__ = "0.1.0"

from exrec.errors import ExrecError  # noqa: E402

__all__ = ["ExrecError", "__version__"]
