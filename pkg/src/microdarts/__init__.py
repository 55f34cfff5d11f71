"""Desk-scale differentiable architecture search.

Two search spaces (cell graphs and hypercuboid grids), two architecture
weighting rules (scalar softmax and Max-W), two annealing schedules, and
a first-order bilevel search engine, all on a small float64 autodiff core.
"""

from .tensor import Tensor, GradTape, ShapeError, backward, no_grad

__all__ = ["Tensor", "GradTape", "ShapeError", "backward", "no_grad"]

__version__ = "0.1.0"
