"""Joint video-to-music matching and music-moment grounding, desk scale.

Submodules: autodiff (tensor core), nn (transformer blocks), model (the
network), losses, metrics (evaluation protocol), data (formats + synthetic
dataset), train (loop + evaluation drivers), checkpoint, cli.
"""

__version__ = "0.1.0"
