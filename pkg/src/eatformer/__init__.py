"""EATFormer at desk scale on a float64 numpy autodiff engine."""

from .analysis import AlphaReport, CostReport, alpha_report, model_cost
from .attention import DeformableAttention, MultiHeadAttention
from .blocks import FFN, GLI, MSRA, EATBlock, wom_mix
from .errors import (
    AxisError,
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    EATFormerError,
    FormatError,
    GeometryError,
    IntegrityError,
    PopulationError,
)
from .estimator import EATFormerClassifier
from .evolution import Population, evolve
from .model import VARIANTS, EATFormer, VariantSpec, build_variant, load_checkpoint, save_checkpoint
from .tensor import Parameter, Tensor, count_macs, no_grad

__version__ = "0.1.0"
