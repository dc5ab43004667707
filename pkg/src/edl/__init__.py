"""Ensembles, Jensen-gap diversity and diversity-regularized training in plain numpy."""

from .losses import (Brier, CrossEntropy, DecompositionReport, EceConfig, SquaredError, auxiliary_diversity,
                     ce_gap_closed_form, decompose, expected_calibration_error, metrics, mse_gap_closed_form)
from .regularizers import (RegularizedObjectiveSpec, RegularizerKind, diversity_value, objective_gradient,
                           objective_value)
from .simplex import (PaddingPolicy, PredictionSet, SeededRng, TabularDataset, ensemble_average,
                      load_dataset_csv, load_predictions, pad_and_renormalize, save_dataset_csv,
                      save_predictions)

__version__ = "0.1.0"
