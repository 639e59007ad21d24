"""Graph neural network ensembles for molecular HOMO-LUMO gap regression."""

from .chem import MolGraph, mol_from_smiles, parse_smiles
from .ensemble import PredictionMatrix, ensemble_all, ensemble_mean, error_vs_uncertainty, uncertainty_std
from .models import ModelConfig, build_batch, count_params, forward, init_params
from .training import Dataset, TrainConfig, load_checkpoint, load_dataset, predict, save_checkpoint, train

__version__ = "0.1.0"
