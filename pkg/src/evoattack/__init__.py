"""Black-box adversarial examples via a genetic algorithm over pixel genomes."""

__version__ = "0.1.0"

from .attack import AttackResult, AttackSpec, batch_attack, distance, fitness, run_attack
from .datasets import LabeledDataset, gen_synthetic, load_cifar10, load_idx, split
from .ga import GAParams
from .models import Classifier, ModelConfig, accuracy, distill, load_weights, save_weights, train

__all__ = [
    "AttackResult", "AttackSpec", "batch_attack", "distance", "fitness", "run_attack",
    "LabeledDataset", "gen_synthetic", "load_cifar10", "load_idx", "split",
    "GAParams",
    "Classifier", "ModelConfig", "accuracy", "distill", "load_weights", "save_weights", "train",
]
