"""Material surfel splatting: rendering, per-scene fitting and relighting."""

__version__ = "0.1.0"

from .core import (Camera, MaterialGaussian2D, Scene, ValidationError, Violation, orbit_camera,
                   validate_scene)
from .rasterizer import GBuffer, render, render_fast, render_oracle

__all__ = ["Camera", "GBuffer", "MaterialGaussian2D", "Scene", "ValidationError", "Violation",
           "orbit_camera", "render", "render_fast", "render_oracle", "validate_scene", "__version__"]
