__version__ = "0.1.0"

from .estimator import BridgeSegmenter, WindowNormalizer  # noqa: E402

__all__ = ["BridgeSegmenter", "WindowNormalizer", "__version__"]
