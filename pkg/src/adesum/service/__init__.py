from .app import ServiceSettings, create_app
from .store import ServiceStore

__all__ = ["ServiceSettings", "ServiceStore", "create_app"]
