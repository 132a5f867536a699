from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import Dataset, DatasetSpec, IDXFormatError, load_dataset, read_idx, write_idx
from .export import export_param_histograms, param_histograms
from .train import METRICS_HEADER, TrainingDiverged, evaluate, train
