"""Region-conditioned multichannel speech extraction at toy scale.

Subpackages: ``sim`` (room acoustics and scene synthesis) and ``network``
(band-split RNN, training, composition of region queries).
"""
from .dsp import Spectrogram, StftConfig, istft, stft
from .geometry import MicArray, QueryRegion, SourcePose, format_query, parse_query, region_contains

__version__ = "0.1.0"

__all__ = ["Spectrogram", "StftConfig", "stft", "istft", "MicArray", "QueryRegion", "SourcePose",
           "parse_query", "format_query", "region_contains", "__version__"]
