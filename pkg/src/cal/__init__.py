"""Counterfactual attention learning on a small numpy autodiff engine.

Submodules are imported explicitly (``cal.model``, ``cal.train`` and so on)
so that inference code never pulls in the training-only counterfactual path.
"""

__version__ = "0.1.0"
