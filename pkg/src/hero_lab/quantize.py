"""Post-training uniform quantization of weight tensors.

Default policy spans each weight tensor's exact [min, max] with 2^bits
evenly spaced levels; values snap to the nearest level with ties rounded
half to even. The symmetric alternative centers the grid on zero using
the tensor's absolute maximum. Only weight-kind tensors are touched;
biases and bn parameters pass through, and nothing is recalibrated
afterwards.

The level grid stores its two endpoints as the exact endpoint floats
rather than reconstructing them arithmetically, so re-quantizing an
already quantized tensor reproduces it bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .errors import HeroLabError

POLICIES = ("minmax_asymmetric", "absmax_symmetric")


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    range_policy: str = "minmax_asymmetric"

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise HeroLabError(f"bits must lie in [2, 16], got {self.bits}")
        if self.range_policy not in POLICIES:
            raise HeroLabError(f"range_policy must be one of {POLICIES}, "
                               f"got {self.range_policy!r}")


def _grid(spec: QuantSpec, values: np.ndarray) -> tuple[float, float, float] | None:
    """(lo, hi, step) for the tensor, or None when the range collapses."""
    if spec.range_policy == "minmax_asymmetric":
        lo, hi = float(values.min()), float(values.max())
    else:
        m = float(np.abs(values).max())
        lo, hi = -m, m
    if hi <= lo:
        return None
    return lo, hi, (hi - lo) / (2**spec.bits - 1)


def quant_step(spec: QuantSpec, values: np.ndarray) -> float:
    """Level spacing the tensor would be quantized with (0 if degenerate)."""
    g = _grid(spec, np.asarray(values, dtype=np.float64))
    return 0.0 if g is None else g[2]


def quantize_tensor(values: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Snap ``values`` onto the tensor's uniform level grid.

    Constant tensors (or an all-zero tensor under the symmetric policy)
    are returned unchanged: a zero-width range has no grid.
    """
    v = np.asarray(values, dtype=np.float64)
    g = _grid(spec, v)
    if g is None:
        return v.copy()
    lo, hi, step = g
    top = 2**spec.bits - 1
    # np.round ties half to even
    k = np.clip(np.round((v - lo) / step), 0, top).astype(np.int64)
    levels = lo + step * np.arange(top + 1)
    levels[0] = lo
    levels[top] = hi
    return levels[k]


def quantize_params(params: models.ParamSet, spec: QuantSpec) -> models.ParamSet:
    """Quantize every weight tensor; other entries are shared unchanged."""
    replacements = {e.name: quantize_tensor(e.value, spec)
                    for e in params if e.perturbable}
    return params.replaced(replacements)


@dataclass(frozen=True)
class SweepRow:
    bits: int  # 0 marks the unquantized reference row
    eval_loss: float
    eval_acc: float


def sweep(model_spec: models.ModelSpec, params: models.ParamSet, dataset, bits: list[int],
          *, range_policy: str = "minmax_asymmetric", running=None,
          batch_size: int = 512) -> list[SweepRow]:
    """Evaluate the model at full precision and at each bit width.

    The full-precision row comes first with bits=0; quantized rows follow
    in ascending bit order, each independently quantized from the same
    full-precision parameters.
    """
    loss, acc = models.evaluate(model_spec, params, dataset, running=running,
                                batch_size=batch_size)
    rows = [SweepRow(bits=0, eval_loss=loss, eval_acc=acc)]
    for b in sorted(set(int(b) for b in bits)):
        q = quantize_params(params, QuantSpec(bits=b, range_policy=range_policy))
        loss, acc = models.evaluate(model_spec, q, dataset, running=running,
                                    batch_size=batch_size)
        rows.append(SweepRow(bits=b, eval_loss=loss, eval_acc=acc))
    return rows
