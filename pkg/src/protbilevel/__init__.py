"""Bilevel (atom and residue) graph transformer for protein structure pre-training, in pure NumPy."""

from .model import VabsNet, VabsNetConfig
from .masking import MaskConfig
from .structures import ProteinChain, generate_synthetic_chain, load_chain, parse_pdb, save_chain
from .training import TrainConfig, finetune_node_class, pretrain

__all__ = [
    "MaskConfig",
    "ProteinChain",
    "TrainConfig",
    "VabsNet",
    "VabsNetConfig",
    "finetune_node_class",
    "generate_synthetic_chain",
    "load_chain",
    "parse_pdb",
    "pretrain",
    "save_chain",
]
__version__ = "0.1.0"
