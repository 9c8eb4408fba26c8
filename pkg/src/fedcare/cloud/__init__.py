from .service import CloudConfig, CloudService

__all__ = ["CloudConfig", "CloudService"]
