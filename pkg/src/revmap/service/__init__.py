"""Session service package."""

from .app import create_app
from .sessions import LoadedModel, Session, SessionManager, load_for_serving

__all__ = ["create_app", "LoadedModel", "Session", "SessionManager", "load_for_serving"]
