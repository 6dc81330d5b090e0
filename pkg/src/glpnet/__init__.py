"""Two-stream RGB-D segmentation with local (offset-warp) and global (context attention) fusion.

The package is self-contained: a small numpy autodiff engine (:mod:`glpnet.tensor`,
:mod:`glpnet.ops`, :mod:`glpnet.nn`), the fusion modules, a desk-scale network,
the training recipe, metrics, file formats and a synthetic RGB-D generator.
"""

from glpnet.tensor import ContractError, NonFiniteError, ShapeError, Tensor, no_grad, precision
from glpnet.network import BackboneConfig, GLPNet, ModelConfig
from glpnet.training import TrainConfig

__all__ = [
    "BackboneConfig",
    "ContractError",
    "GLPNet",
    "ModelConfig",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "no_grad",
    "precision",
]

__version__ = "0.1.0"
