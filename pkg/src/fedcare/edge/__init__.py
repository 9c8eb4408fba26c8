from .node import EdgeConfig, EdgeNode, FederationSession, ModelSelection

__all__ = ["EdgeConfig", "EdgeNode", "FederationSession", "ModelSelection"]
