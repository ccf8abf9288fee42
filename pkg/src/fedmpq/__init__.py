"""Multi-codebook product quantization for federated learning uplinks."""

from .codebook_service import CodebookSet, KMeansConfig, enforce_zero_codeword, generate_codebooks, kmeans
from .learning import ModelState, TrainConfig, build_model, gen_synthetic_federation
from .pq_codec import (
    Codebook,
    QuantizationCode,
    SparseResidual,
    dequantize,
    prune_residual,
    quantize_best,
    quantize_with_codebook,
)
from .secure_agg import SecureAggregator
from .simulator import RoundConfig, Simulator, run_experiment

__version__ = "0.1.0"
