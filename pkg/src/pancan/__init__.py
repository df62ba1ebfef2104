"""Panoptic context aggregation networks for multi-label classification.

The package implements context-aware kernel machinery (fixed-point solver
and its unfolded feature map), multi-order random-walk attention over grid
cells, cross-scale anchor fusion, a grouped multi-label head, training and
evaluation tooling, and a command-line interface.  The scikit-learn style
``PanCANClassifier`` is the main user-facing entry point.
"""

__all__ = ["PanCANClassifier"]
__version__ = "0.1.0"


def __getattr__(name):
    if name == "PanCANClassifier":
        from .estimator import PanCANClassifier

        return PanCANClassifier
    raise AttributeError(name)
