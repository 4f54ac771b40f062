"""A four-stage prediction-based error-bounded lossy compressor."""

from .core import (
    PREDICTORS,
    Archive,
    CompressionConfig,
    ConfigError,
    ObservedMetrics,
    QuantOutcome,
    StageTiming,
    compress,
    decompress,
    ensure_compiled,
    predict_quantize,
    reconstruct,
)
from .huffman import (
    BinHistogram,
    Codebook,
    CodecError,
    build_codebook,
    count_frequencies,
    decode,
    encode,
    huffman_lengths,
)
from .lossless import CHOICES as LOSSLESS_CHOICES
from .lossless import lossless_decode, lossless_encode

__all__ = [
    "PREDICTORS", "LOSSLESS_CHOICES", "Archive", "BinHistogram", "Codebook", "CodecError",
    "CompressionConfig", "ConfigError", "ObservedMetrics", "QuantOutcome", "StageTiming",
    "build_codebook", "compress", "count_frequencies", "decode", "decompress", "encode",
    "ensure_compiled", "huffman_lengths", "lossless_decode", "lossless_encode",
    "predict_quantize", "reconstruct",
]
