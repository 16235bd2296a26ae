"""ResTv2 / EMSAv2 reference implementation and analysis kit.

A numpy-backed efficient multi-scale vision transformer with an
upsample-reconstruction attention branch, plus tooling to count parameters
and FLOPs, probe branch similarity and frequency content, check gradients,
and serialize weights.
"""

from .attention import (EmsaConfig, emsa_forward, emsav2_forward,
                        styled_block_attention, window_merge, window_partition)
from .cka import block_output_cka_matrix, branch_similarity_report, linear_cka
from .flops import (FlopsReport, count_flops, count_params, param_breakdown,
                    param_reconciliation, window_style_flops)
from .model import (PRESETS, Model, ModelConfig, build_model, describe,
                    get_config, load_config_file, parameter_plan)
from .positional import ape_apply, pa_apply, rpe_apply
from .spectrum import SpectrumProfile, delta_log_amplitude
from .tensor import (ConfigError, FlopRecorder, ShapeError, Tape, Tensor,
                     UsageError)
from .weights_io import (WeightFormatError, check_against_plan, load_weights,
                         save_weights)

__version__ = "1.0.0"

__all__ = [
    "EmsaConfig", "emsa_forward", "emsav2_forward", "styled_block_attention",
    "window_partition", "window_merge",
    "linear_cka", "branch_similarity_report", "block_output_cka_matrix",
    "FlopsReport", "count_flops", "count_params", "param_breakdown",
    "param_reconciliation", "window_style_flops",
    "Model", "ModelConfig", "PRESETS", "build_model", "describe",
    "get_config", "load_config_file", "parameter_plan",
    "ape_apply", "pa_apply", "rpe_apply",
    "SpectrumProfile", "delta_log_amplitude",
    "Tensor", "Tape", "FlopRecorder", "ShapeError", "ConfigError",
    "UsageError",
    "save_weights", "load_weights", "check_against_plan",
    "WeightFormatError",
    "__version__",
]
