"""Robust lottery-ticket subnetworks and a dynamic stochastic ensemble defense built from them."""

from .attacks import AttackConfig, eot_attack, evaluate_accuracy, pgd_attack
from .ensemble import (
    DynamicEnsemble,
    SamplerConfig,
    ThetaSample,
    TicketLibrary,
    dynamic_predict,
    ensemble_forward,
    sample_r2s,
    sample_theta,
)
from .masked import ARCH_IDS, MaskedModel, architecture_spec, build_model, masked_forward, topk_binarize
from .pruning import RobustTicket, TrainingConfig, inner_maximize, straight_through_score_grad, train_ticket
from .store import LibraryStore, load_ticket, save_ticket, validate_library
from .transfer import TransferMatrix, transfer_gap_stats, transfer_matrix

__all__ = [
    "ARCH_IDS", "AttackConfig", "DynamicEnsemble", "LibraryStore", "MaskedModel", "RobustTicket",
    "SamplerConfig", "ThetaSample", "TicketLibrary", "TrainingConfig", "TransferMatrix",
    "architecture_spec", "build_model", "dynamic_predict", "ensemble_forward", "eot_attack",
    "evaluate_accuracy", "inner_maximize", "load_ticket", "masked_forward", "pgd_attack", "sample_r2s",
    "sample_theta", "save_ticket", "straight_through_score_grad", "topk_binarize", "train_ticket",
    "transfer_gap_stats", "transfer_matrix", "validate_library",
]

__version__ = "0.1.0"
