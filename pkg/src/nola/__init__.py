"""Low-rank weight deltas built from seeded random bases, with LoRA and PRANC baselines."""

from .errors import DomainError, FormatError, UsageError, VersionError
from .layers import (
    AdaptedLinear,
    LoraFactor,
    Method,
    NolaFactor,
    PrancFactor,
    coeff_gradients,
    compression_ratio,
    cost_model,
    lora_delta,
    merge,
    nola_delta,
    param_count,
    pranc_delta,
    pranc_gradients,
)
from .linalg import numerical_rank, reshape_near_square
from .quant import QuantSpec, dequantize, fake_quantize, ptq_checkpoint, qat_step, quantize
from .rand_basis import BasisSpec, Role, SeedSpec, Sharing, accumulate_mixture, derive_seed, generate_basis_matrix
from .store import Encoding, LayerRecord, TaskCheckpoint, deserialize, dump, read_checkpoint, reconstruct, report, serialize, write_checkpoint

__version__ = "0.1.0"
