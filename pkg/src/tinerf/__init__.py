"""Dynamic neural radiance fields built on temporal feature interpolation.

Two representations share one renderer and trainer: keyframe MLPs blended
in time (``NeuralModel``) and 4D multi-resolution hash grids
(``GridModel``).  Everything, including differentiation, is plain numpy
with a few numba kernels on the hash-grid hot path.
"""
__version__ = "0.1.0"

from .autodiff import Graph, ParameterTape, grad_check  # noqa: E402
from .data import SceneDataset, SynthSpec, load_dataset, synthesize  # noqa: E402
from .models import GridConfig, GridModel, NeuralConfig, NeuralModel, build_model  # noqa: E402
from .training import TrainConfig, evaluate, train  # noqa: E402

__all__ = ["Graph", "ParameterTape", "grad_check", "SceneDataset", "SynthSpec", "load_dataset",
           "synthesize", "GridConfig", "GridModel", "NeuralConfig", "NeuralModel", "build_model",
           "TrainConfig", "evaluate", "train", "__version__"]
