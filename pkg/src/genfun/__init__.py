"""Numerical convexity theory of generating functions.

Core objects: generating functions g(x, y, z) with g_z < 0 on a fibered
domain, the implicit maps solving the generating equations, the regularity
conditions (nondegeneracy, injectivity, and the weak/strict tensor
conditions), the dual generating function, and the g-convex calculus with its
transform and normal mapping.
"""

__version__ = "0.1.0"

from .reports import ConditionReport, Verdict  # noqa: F401
