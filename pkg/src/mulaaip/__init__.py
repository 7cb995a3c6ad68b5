"""Antibody-antigen interaction prediction from structure graphs and sequence relations."""
from ._accel import NUMBA_AVAILABLE, USE_NUMBA
from .basis import BasisConfig
from .data import PairRecord, dg_from_ddg, dg_from_kd, kfold_split
from .graphs import StructuralGraph, build_relation_graph, build_structural_graph
from .model import LossConfig, ModelConfig, MulaaipModel, TrainConfig, loss_affinity, loss_neutralization, train
from .structure_io import ProteinStructure, parse_pdb, read_pdb

__version__ = "0.1.0"

__all__ = [
    "NUMBA_AVAILABLE", "USE_NUMBA", "BasisConfig", "PairRecord", "dg_from_ddg", "dg_from_kd", "kfold_split",
    "StructuralGraph", "build_relation_graph", "build_structural_graph", "LossConfig", "ModelConfig",
    "MulaaipModel", "TrainConfig", "loss_affinity", "loss_neutralization", "train", "ProteinStructure",
    "parse_pdb", "read_pdb",
]
