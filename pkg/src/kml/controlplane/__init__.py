from kml.controlplane.registry import EntityRegistry
from kml.controlplane.server import build_app, main

__all__ = ["EntityRegistry", "build_app", "main"]
