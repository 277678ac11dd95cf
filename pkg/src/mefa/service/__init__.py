"""HTTP service wrapping the retrieval lab."""

from .app import create_app

__all__ = ["create_app"]
