"""Dataset construction, detector orchestration and point-matched evaluation
for mitotic-figure detection."""

__version__ = "0.1.0"
