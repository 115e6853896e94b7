"""Protein-ligand binding energy models trained with supervised and score matching losses."""

from .data import Complex, Manifest, ManifestEntry, featurize, load_dataset, validate_manifest
from .energy import EnergyModel, energy, energy_grad_ligand
from .losses import dsm_loss, mse_loss, perturb, total_loss
from .metrics import pearson, rank_fit, rmse, spearman
from .trainer import TrainConfig, fit, run_experiment

__all__ = [
    "Complex",
    "Manifest",
    "ManifestEntry",
    "featurize",
    "load_dataset",
    "validate_manifest",
    "EnergyModel",
    "energy",
    "energy_grad_ligand",
    "dsm_loss",
    "mse_loss",
    "perturb",
    "total_loss",
    "pearson",
    "spearman",
    "rmse",
    "rank_fit",
    "TrainConfig",
    "fit",
    "run_experiment",
]
