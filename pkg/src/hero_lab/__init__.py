"""Desk-scale training laboratory for curvature-regularized optimization.

The package trains small networks with a family of update rules (plain
SGD, perturbed-gradient, gradient-l1, and the curvature-penalized rule),
quantizes the results, and checks closed-form perturbation lower bounds
against brute-force minima. Everything is driven either by the JSON
config CLI (``hero-lab``) or by the modules directly.

Submodules import lazily so the CLI can cap BLAS threads before numpy
loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = (
    "autodiff", "cli", "config", "data", "errors", "models", "quantize",
    "reporting", "robustness", "seeding", "serialization", "trainers",
)

_EXPORTS = {
    "ExperimentConfig": ("config", "ExperimentConfig"),
    "run_experiment": ("config", "run_experiment"),
    "ModelSpec": ("models", "ModelSpec"),
    "ParamSet": ("models", "ParamSet"),
    "ParamEntry": ("models", "ParamEntry"),
    "LabeledDataset": ("data", "LabeledDataset"),
    "NoiseSpec": ("data", "NoiseSpec"),
    "TrainerConfig": ("trainers", "TrainerConfig"),
    "DiagnosticsConfig": ("trainers", "DiagnosticsConfig"),
    "train": ("trainers", "train"),
    "QuantSpec": ("quantize", "QuantSpec"),
    "quantize_tensor": ("quantize", "quantize_tensor"),
    "lower_bound_l2": ("robustness", "lower_bound_l2"),
    "lower_bound_linf": ("robustness", "lower_bound_linf"),
    "min_perturbation_bruteforce": ("robustness", "min_perturbation_bruteforce"),
    "hessian_norm_metric": ("robustness", "hessian_norm_metric"),
    "HeroLabError": ("errors", "HeroLabError"),
    "ConfigError": ("errors", "ConfigError"),
}

__all__ = ["__version__", *_SUBMODULES, *_EXPORTS]


def __getattr__(name):
    if name in _SUBMODULES:
        return import_module(f".{name}", __name__)
    if name in _EXPORTS:
        module, attr = _EXPORTS[name]
        return getattr(import_module(f".{module}", __name__), attr)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(__all__))
