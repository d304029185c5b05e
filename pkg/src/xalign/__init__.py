"""Cross-lingual alignment objectives, a bitext alignment pipeline and a multi-seed evaluation harness."""

__version__ = "0.1.0"

from .errors import XAlignError  # noqa: E402

__all__ = ["__version__", "XAlignError"]
