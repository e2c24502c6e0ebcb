"""Graph-conditioned part-layout prior on a small numpy autodiff core.

Modules: ``tensor`` (autodiff), ``optim`` (Adam), ``geometry`` (boxes and
adjacency), ``hiergraph`` (two-tier part graph), ``aggregator`` (hierarchical
GNN), ``losses`` (graph regularisers), ``prior`` (flow-matching denoiser),
``synth`` (planted data and edge-accuracy), ``model``, ``config``,
``harness`` and ``cli``.
"""

from .tensor import NumericalError, ShapeError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "ShapeError", "NumericalError", "__version__"]
