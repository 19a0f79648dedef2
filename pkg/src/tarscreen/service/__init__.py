"""HTTP service for live screening sessions."""

from .app import create_app

__all__ = ["create_app"]
