"""HTTP service surface: FastAPI app plus request/response models."""

from .app import app, create_app, resolve_config

__all__ = ["app", "create_app", "resolve_config"]
