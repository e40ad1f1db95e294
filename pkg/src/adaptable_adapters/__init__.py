"""Adaptable adapters: rational activations and learnable layer switches for adapter tuning."""

from .adapters import (AA, AAFocused, AdapterConfig, AdapterDrop, AdapterModel, ArchitectureSpec, Baseline,
                       LastK, RationalOnly, SwitchOnly, count_parameters, extract_architecture, make_sim_spec,
                       parameter_report, variant_from_dict, variant_to_dict)
from .autodiff import BackwardError, DomainError, ShapeError, Tensor, backward, gradient_check, no_grad
from .backbone import BackboneConfig, ConfigError, Encoder, build_backbone, frozen_parameter_count
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, SplitPlan, generate_synthetic_task, load_tsv, make_split
from .experiment import (ExperimentConfig, SchemaError, aggregate, derive_adapterdrop_counterparts,
                         derive_focused, layer_sweep, load_results, run_experiment, write_report)
from .optim import Adam
from .rational import RationalCoefficients, fit_to_function, init_named, rational_forward, rational_values
from .switch import Decision, SwitchParams, gs_forward, gumbel_sample, hard_decision, mix
from .training import RunResult, TrainConfig, evaluate, train

__version__ = "0.1.0"
