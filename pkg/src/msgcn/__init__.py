"""Object-based change detection with a multiscale graph convolutional network."""

from .evaluation import MetricReport, confusion, metrics
from .pipeline import PipelineConfig, run_ablation, run_pipeline
from .raster_io import ChangeMap, Raster, load_raster, stack_pair
from .segmentation import build_hierarchy, fnea_segment
from .synthetic import SceneSpec, generate_synthetic_pair

__version__ = "0.1.0"
