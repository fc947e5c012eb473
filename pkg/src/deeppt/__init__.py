"""Deep-PT: a learned correlation point tracker with a KLT baseline."""
from .heads import TrackabilityClassifier, TrackingScoreClassifier
from .klt import KLTTracker
from .pipeline import DeepPTModel, PipelineConfig, run_sequence
from .tracker import DeepPTTracker

__version__ = "0.1.0"

__all__ = [
    "DeepPTModel",
    "DeepPTTracker",
    "KLTTracker",
    "PipelineConfig",
    "TrackabilityClassifier",
    "TrackingScoreClassifier",
    "run_sequence",
]
