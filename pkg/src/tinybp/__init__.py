"""Hardware-aware compression for 1D PPG-to-blood-pressure models.

Three trainable stages shrink a seed network: differentiable architecture
search over layer alternatives, structured channel pruning with trainable
masks, and mixed-precision bit-width search with quantization-aware
training.  The result exports to a sub-byte integer container executed by
an integer-only runtime that matches the training-time fake-quantized
reference bit for bit.
"""

from .autodiff import Tensor, no_grad
from .config import (ExperimentConfig, MpsConfig, NasConfig, PitConfig,
                     STAGES, lambda_grid)
from .evalkit import (MetricsReport, ParetoPoint, aami_check, compute_mae,
                      pareto_front, scatter_svg, smooth_output,
                      waveform_to_labels)
from .graph import GraphShapeError, ModelGraph
from .intrt import footprint, int_forward, pack, run_quantized, unpack
from .nas import (build_supernet, choice_nodes, cost_expectation, dnas_train,
                  extract_architecture)
from .pruning import (attach_masks, clamp_empty_layers, export_pruned,
                      mask_cost, masked_forward, pit_train)
from .quant import (QuantGraph, QuantizedModel, attach_quant, export_quantized,
                    fake_quant_minmax, fold_norms, mps_train, pact_activation,
                    tau_schedule)
from .seeds import build_seed
from .signals import (SubjectRecord, Window, extract_labels, finetune_split,
                      records_to_windows, subject_kfold, synth_generate)
from .training import (TaskData, TrainLog, assemble_task, evaluate_mse, fit,
                       run_search)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad",
    "ExperimentConfig", "NasConfig", "PitConfig", "MpsConfig", "STAGES",
    "lambda_grid",
    "MetricsReport", "ParetoPoint", "aami_check", "compute_mae",
    "pareto_front", "scatter_svg", "smooth_output", "waveform_to_labels",
    "GraphShapeError", "ModelGraph",
    "footprint", "int_forward", "pack", "run_quantized", "unpack",
    "build_supernet", "choice_nodes", "cost_expectation", "dnas_train",
    "extract_architecture",
    "attach_masks", "clamp_empty_layers", "export_pruned", "mask_cost",
    "masked_forward", "pit_train",
    "QuantGraph", "QuantizedModel", "attach_quant", "export_quantized",
    "fake_quant_minmax", "fold_norms", "mps_train", "pact_activation",
    "tau_schedule",
    "build_seed",
    "SubjectRecord", "Window", "extract_labels", "finetune_split",
    "records_to_windows", "subject_kfold", "synth_generate",
    "TaskData", "TrainLog", "assemble_task", "evaluate_mse", "fit",
    "run_search",
]
