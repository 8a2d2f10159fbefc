"""Occupancy-grid navigation lab: self-supervised context encoding plus
graph-based waypoint RL in a deterministic 2-D simulator."""

__version__ = "0.1.0"
