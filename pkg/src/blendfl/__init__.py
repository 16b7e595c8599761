"""Blended horizontal/vertical federated learning over multimodal clients."""
from .client import Client, ModelBundle, local_inference
from .config import ExperimentConfig, ProtocolConfig, load_config
from .orchestrator import (measure_speedup, prepare_federation, run_ablation_grid, run_blendfl,
                           run_fedavg, run_splitnn)
from .server import blend_avg, fed_avg

__version__ = "0.1.0"
