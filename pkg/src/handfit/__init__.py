"""Articulated hand tracking against depth point clouds.

Fits a convex-bodied articulated hand model to depth sensor data by running
several constraint-based rigid body simulations per frame and keeping the
pose that explains the measurements best.
"""

__version__ = "0.1.0"
