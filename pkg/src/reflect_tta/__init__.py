"""Reflective test-time adaptation for segmentation, on a from-scratch numpy autodiff engine."""

from .errors import AdaptError, ConfigError, DataError, FormatError, NumericError, ReflectError, ShapeError
from .reflect import AdaptConfig, AdaptReport, adapt_dataset, adapt_image
from .segmentor import Segmentor, SegmentorConfig
from .similarity import SimilarityConfig, mi_parzen, ncc_loss, reflective_loss
from .synthesizer import SynthConfig, Synthesizer

__version__ = "0.1.0"
