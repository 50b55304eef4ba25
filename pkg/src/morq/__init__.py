"""FP8 Mixture-of-Representations quantization emulation."""

from __future__ import annotations

__version__ = "0.1.0"

from morq.fakequant_gemm import PrecisionCost, block_gemm, fake_quantize, gemm_cost, reference_gemm
from morq.gam import GamScale, ScalingStrategy, gam_compute, gam_reconstruct
from morq.kernels import BACKEND
from morq.mor import (
    QuantizedTensor,
    Recipe,
    RepType,
    get_recipe,
    mor_quantize,
    tensor_level_decide,
    tensor_recipe,
    three_way_recipe,
    two_way_recipe,
)
from morq.stats import StatsState, TensorKey, export_heatmap, fallback_percentage
from morq.tensor import PartitionSpec, TensorF32, read_mort, write_mort

__all__ = [
    "BACKEND",
    "GamScale",
    "PartitionSpec",
    "PrecisionCost",
    "QuantizedTensor",
    "Recipe",
    "RepType",
    "ScalingStrategy",
    "StatsState",
    "TensorF32",
    "TensorKey",
    "block_gemm",
    "export_heatmap",
    "fake_quantize",
    "fallback_percentage",
    "gam_compute",
    "gam_reconstruct",
    "gemm_cost",
    "get_recipe",
    "mor_quantize",
    "read_mort",
    "reference_gemm",
    "tensor_level_decide",
    "tensor_recipe",
    "three_way_recipe",
    "two_way_recipe",
    "write_mort",
]
