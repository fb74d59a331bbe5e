from .block_model import History  # noqa: F401

__version__ = "0.1.0"
