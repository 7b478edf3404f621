"""Forest height mapping from multi-source EO stacks with pretrain/fine-tune model transfer."""

from .config import ConfigError, RunConfig
from .eo_data import EOStack, ForestMask, PlotRecord, PlotTable, RasterGrid, Scene, SparseLabelRaster
from .evaluation import EvalReport, compute_metrics, predict_map
from .model import Checkpoint, ModelConfig, SeUNet
from .train import OptimizerConfig, finetune, pretrain

__version__ = "0.1.0"
