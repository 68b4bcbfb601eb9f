"""Desk-scale learned dough manipulation.

Particle simulator, GNN dynamics, multi-bin policies, tool classification and
closed-loop planning over point clouds.
"""

from .main import CookLab
from .models import CommandResult, PointCloud

__version__ = "0.1.0"
__all__ = ["CookLab", "CommandResult", "PointCloud"]
