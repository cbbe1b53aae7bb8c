"""Post-training quantization with integer and minifloat formats.

Round-to-nearest and GPTQ weight quantization, token-wise activation
quantization, low-rank error compensation, and power-of-two scale
constraints for casting FP4 weights onto an FP8 grid.
"""

import os as _os

# FPQ_THREADS caps BLAS/OpenMP threads; only effective if set before numpy loads
if _os.environ.get("FPQ_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["FPQ_THREADS"])

from . import _backend
from .analysis import (
    DistributionReport,
    ErrorReport,
    cluster_outlier_vector,
    compare,
    error_report,
    gen_synthetic,
    summarize,
)
from .formats import (
    E2M1,
    E3M0,
    E4M3,
    E5M2,
    MiniFloatFormat,
    decode,
    encode_nearest,
    enumerate_values,
    get_format,
    max_finite,
)
from .gptq import CalibrationSet, HessianState, build_hessian, gptq_quantize, proxy_loss, rtn_baseline
from .lorc import LorcFactors, apply_lorc, error_matrix, lorc_factorize
from .quant import (
    QuantizedTensor,
    QuantizationError,
    dequantize,
    quantize,
    quantize_activations_tokenwise,
    quantize_fp,
    quantize_int,
)
from .scalecast import ConstrainedScales, cast_group_to_fp8, constrain_m1, constrain_m2
from .spec import QuantSpec, SpecError, parse_spec

__version__ = "0.1.0"


def backend() -> str:
    """Name of the active kernel backend ("cython" or "python")."""
    return _backend.name
