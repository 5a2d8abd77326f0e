"""Post-training activation quantization for small CNNs.

Fixed-point activations, three quantization schemes (uniform, equal-distance
nonuniform, k-means codebook), calibration and codebook fitting, bit-width
search under an accuracy budget, bit-exact behavioral models of the hardware
conversion units, and activation-storage accounting.
"""

from .fxcore import FxFormat, QCode, RangeError, Tensor, from_fixed, to_fixed
from .netgraph import (
    LabeledDataset,
    ModelGraph,
    QuantConfig,
    evaluate,
    forward,
    load_dataset,
    load_model,
    save_model,
)
from .quant import Codebook, LayerQuantSpec
from .search import BitAllocation, Infeasible, SearchBudget

__version__ = "0.1.0"

__all__ = [
    "BitAllocation",
    "Codebook",
    "FxFormat",
    "Infeasible",
    "LabeledDataset",
    "LayerQuantSpec",
    "ModelGraph",
    "QCode",
    "QuantConfig",
    "RangeError",
    "SearchBudget",
    "Tensor",
    "evaluate",
    "forward",
    "from_fixed",
    "load_dataset",
    "load_model",
    "save_model",
    "to_fixed",
    "__version__",
]
