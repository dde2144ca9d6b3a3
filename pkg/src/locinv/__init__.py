"""Localization-aware inversion for text-guided image editing."""
from .attention import AttentionSnapshot, TokenMap, aggregate, token_map
from .config import RunConfig
from .ddim import NoiseSchedule, SamplerConfig, ddim_invert, ddim_sample
from .errors import InputError, LocInvError, NumericalError
from .evaluation import IoUCurve, MetricReport, compare_methods, image_metrics, iou_curve
from .losses import LossConfig, LossWeights, threshold
from .optimizer import DynamicTokenSet, LossReport, optimize_tokens
from .p2p import EditResult, P2PConfig, attribute_edit, edit
from .pipeline import (InversionResult, PipelineConfig, invert, load_result, reconstruct,
                       save_result)
from .priors import EditSpec, LocalizationPrior, PromptAnnotation, annotate, load_prior

__version__ = "0.1.0"

__all__ = [
    "AttentionSnapshot", "TokenMap", "aggregate", "token_map", "RunConfig", "NoiseSchedule",
    "SamplerConfig", "ddim_invert", "ddim_sample", "InputError", "LocInvError", "NumericalError",
    "IoUCurve", "MetricReport", "compare_methods", "image_metrics", "iou_curve", "LossConfig",
    "LossWeights", "threshold", "DynamicTokenSet", "LossReport", "optimize_tokens", "EditResult",
    "P2PConfig", "attribute_edit", "edit", "InversionResult", "PipelineConfig", "invert",
    "load_result", "reconstruct", "save_result", "EditSpec", "LocalizationPrior",
    "PromptAnnotation", "annotate", "load_prior",
]
