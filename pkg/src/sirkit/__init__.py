"""Shadow-aware inverse rendering toolkit for analytic SDF scenes.

Decomposes multi-view HDR renderings of a known-geometry scene into
albedo, roughness, irradiance, and a differentiable shadow field, and
re-renders the decomposition for relighting and scene editing.
"""

__version__ = "0.1.0"
