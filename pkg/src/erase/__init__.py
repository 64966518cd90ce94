"""Dataset-free object removal toolkit.

Pipeline stages: region inference (tag classification + localization),
test-time low-rank adaptation of a diffusion backbone under
reconstruction and subtype-aggregation objectives, removal-quality
metrics, and an interactive refinement service.
"""

from .backbone import DiffusionBackbone, NoiseSchedule, ToyBackbone, sample_removal
from .bfe import BfeResult, classify_tags, localize_tags, run_bfe
from .losses import (
    AttentionStack,
    LossBreakdown,
    align_loss,
    div_loss,
    normalize_attention,
    recon_loss,
    total_loss,
)
from .lora import LoraState, inject_adapters, merge_adapters
from .metrics import (
    MetricsReport,
    RegionSets,
    ToyFeatureExtractor,
    bg_pres,
    bg_sim,
    fg_sim,
    judge_metric,
    paired_metrics,
)
from .regions import build_label_map, dice, downsample_label_map
from .scene import SyntheticScene, generate_scene
from .tta import TtaConfig, TtaTrace, run_tta
from .types import TagReport

__all__ = [
    "AttentionStack",
    "BfeResult",
    "DiffusionBackbone",
    "LoraState",
    "LossBreakdown",
    "MetricsReport",
    "NoiseSchedule",
    "RegionSets",
    "SyntheticScene",
    "TagReport",
    "ToyBackbone",
    "ToyFeatureExtractor",
    "TtaConfig",
    "TtaTrace",
    "align_loss",
    "bg_pres",
    "bg_sim",
    "build_label_map",
    "classify_tags",
    "dice",
    "div_loss",
    "downsample_label_map",
    "fg_sim",
    "generate_scene",
    "inject_adapters",
    "judge_metric",
    "localize_tags",
    "merge_adapters",
    "normalize_attention",
    "paired_metrics",
    "recon_loss",
    "run_bfe",
    "run_tta",
    "sample_removal",
    "total_loss",
]

__version__ = "0.1.0"
