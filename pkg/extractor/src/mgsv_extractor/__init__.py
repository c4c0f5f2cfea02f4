"""Feature extraction for the grounding stack: decode media, window it the
way the frozen encoders expect, and emit interchange-format token files."""

__version__ = "0.1.0"
