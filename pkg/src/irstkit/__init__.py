"""Cross-domain infrared small target detection toolkit.

Ships a self-contained NCHW autodiff engine, differentiable 2-D spectra with
phase rectification, a U-shaped detector with orthogonal skip attention and
selective style recomposition, IRSTD metrics, a synthetic multi-domain scene
generator, and a CLI tying them into reproducible experiments.
"""

__version__ = "0.1.0"

from .tensor import Tensor  # noqa: F401
