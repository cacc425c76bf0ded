"""Light GRU toolkit: recurrent cells with exact BPTT, CTC and framewise heads,
the training recipe, and gate/gradient/parameter diagnostics."""

from .analysis import cross_correlation, gate_redundancy_report, gradient_norms, param_count
from .cells import CELL_KINDS, make_cell
from .config import RunConfig, load_config
from .ctc import best_path_decode, ctc_loss
from .data import gen_synthetic, read_feature_archive, write_feature_archive
from .network import Network, StackConfig
from .trainer import Trainer, evaluate, train_epochs

__all__ = [
    "CELL_KINDS", "Network", "RunConfig", "StackConfig", "Trainer", "best_path_decode",
    "cross_correlation", "ctc_loss", "evaluate", "gate_redundancy_report", "gen_synthetic",
    "gradient_norms", "load_config", "make_cell", "param_count", "read_feature_archive",
    "train_epochs", "write_feature_archive",
]
