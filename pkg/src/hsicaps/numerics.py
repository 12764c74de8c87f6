"""Dense numerical primitives shared by every layer.

Everything here is a pure function of float64 numpy arrays: the ReLU pair,
valid-padding convolutions (nothing pads implicitly, so output lengths always
follow ``floor((length - kernel) / stride) + 1``), and a central-difference
gradient checker used to validate the hand-written backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "GradCheckReport",
    "conv1d_output_length",
    "conv1d_valid",
    "conv2d_single_channel",
    "finite_difference_check",
    "relu",
    "relu_grad",
]

# Floor for the relative-error denominator so near-zero gradient pairs do not
# blow the ratio up.
REL_ERR_FLOOR = 1e-12


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise ``max(0, x)``; shape and dtype preserved."""
    return np.maximum(x, 0.0)


def relu_grad(pre_activation: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gate ``upstream`` by the ReLU derivative taken at ``pre_activation``.

    The derivative at exactly zero is taken as zero.
    """
    return np.where(pre_activation > 0, upstream, 0.0)


def conv1d_output_length(length: int, kernel_size: int, stride: int) -> int:
    """Number of valid kernel placements: ``floor((length - kernel) / stride) + 1``."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kernel_size < 1:
        raise ValueError(f"kernel size must be >= 1, got {kernel_size}")
    if length < kernel_size:
        raise ValueError(
            f"signal length {length} is shorter than kernel size {kernel_size}"
        )
    return (length - kernel_size) // stride + 1


def conv1d_valid(
    signal: np.ndarray,
    kernels: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
) -> np.ndarray:
    """Valid-padding 1D convolution over the leading axis of ``signal``.

    Args:
        signal: ``(length, in_channels)`` input sequence.
        kernels: ``(out_channels, in_channels, kernel_size)`` filter bank.
        bias: ``(out_channels,)`` offsets added at every output position.
        stride: step between kernel placements, >= 1.

    Returns:
        ``(out_length, out_channels)`` array with
        ``out_length = floor((length - kernel_size) / stride) + 1``.
    """
    signal = np.asarray(signal, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if signal.ndim != 2:
        raise ValueError(f"signal must be (length, in_channels), got shape {signal.shape}")
    if kernels.ndim != 3:
        raise ValueError(
            f"kernels must be (out_channels, in_channels, kernel_size), got shape {kernels.shape}"
        )
    length, in_channels = signal.shape
    out_channels, kernel_in, kernel_size = kernels.shape
    if kernel_in != in_channels:
        raise ValueError(
            f"kernels expect {kernel_in} input channels, signal has {in_channels}"
        )
    if bias.shape != (out_channels,):
        raise ValueError(f"bias must have shape ({out_channels},), got {bias.shape}")
    conv1d_output_length(length, kernel_size, stride)
    windows = sliding_window_view(signal, kernel_size, axis=0)[::stride]
    return np.einsum("lcf,ocf->lo", windows, kernels, optimize=True) + bias


def conv2d_single_channel(
    patch: np.ndarray, kernel: np.ndarray, bias: float
) -> float:
    """Full-overlap 2D filter response: ``sum(patch * kernel) + bias``.

    ``patch`` and ``kernel`` must have identical 2D shapes; with a kernel the
    size of the patch the valid output is a single scalar.
    """
    patch = np.asarray(patch, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if patch.ndim != 2:
        raise ValueError(f"patch must be 2D, got shape {patch.shape}")
    if patch.shape != kernel.shape:
        raise ValueError(
            f"patch shape {patch.shape} and kernel shape {kernel.shape} must match exactly"
        )
    return float(np.sum(patch * kernel) + bias)


@dataclass
class GradCheckReport:
    """Worst-coordinate outcome of a finite-difference gradient comparison."""

    max_relative_error: float
    worst_index: int
    analytic: float
    numeric: float


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic_grad: np.ndarray,
    epsilon: float = 1e-5,
) -> GradCheckReport:
    """Compare an analytic gradient against central differences, coordinate by coordinate.

    ``params`` is perturbed in place one coordinate at a time (and restored),
    with ``f`` re-evaluated at ``params +/- epsilon * e_i``; ``f`` must read the
    array it is handed rather than a private copy.  The relative error at each
    coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.

    Raises:
        FloatingPointError: if ``f`` returns a non-finite value at any
            perturbed point.
        ValueError: on shape mismatch, an empty parameter array, or a
            non-positive ``epsilon``.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    params = np.asarray(params, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != params.shape:
        raise ValueError(
            f"gradient shape {analytic_grad.shape} does not match parameter shape {params.shape}"
        )
    if params.size == 0:
        raise ValueError("cannot gradient-check an empty parameter array")

    flat_params = params.reshape(-1)
    flat_grad = analytic_grad.reshape(-1)
    report = GradCheckReport(
        max_relative_error=-1.0, worst_index=0, analytic=0.0, numeric=0.0
    )
    for i in range(flat_params.size):
        original = flat_params[i]
        flat_params[i] = original + epsilon
        f_plus = float(f(params))
        flat_params[i] = original - epsilon
        f_minus = float(f(params))
        flat_params[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(
                f"non-finite value from f at perturbed coordinate {i}"
            )
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        analytic = float(flat_grad[i])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERR_FLOOR)
        if rel > report.max_relative_error:
            report = GradCheckReport(rel, i, analytic, numeric)
    return report
