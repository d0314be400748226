"""dlab: a small laboratory for studying classification distillation.

Losses (hard CE, label smoothing, teacher distillation, and hand-crafted
partial-teacher variants), a synthetic benchmark with controllable class
similarity and task difficulty, hand-derived MLP training, and diagnostics
for the gradient re-weighting and logit-geometry effects.
"""

from ._kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
