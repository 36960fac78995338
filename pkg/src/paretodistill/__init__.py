"""Pareto-guided policy distillation of a game-playing teacher into small students."""
from __future__ import annotations

__version__ = "0.1.0"
