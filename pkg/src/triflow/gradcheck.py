"""
Central finite-difference checks of analytic gradients.

Run inside ``tensor.default_dtype(np.float64)``: 32-bit values are too coarse
for trustworthy finite differences.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradcheckResult:
    ok: bool
    checked: int
    max_error: float
    worst: str

    def __bool__(self) -> bool:
        return self.ok


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    rtol: float = 1e-4,
    atol: float = 1e-6,
    max_checks: int | None = None,
    seed: int = 0,
) -> GradcheckResult:
    """Compare backward() against central differences for every input entry.

    ``fn`` recomputes a scalar from the current values of ``inputs``. Entries
    whose analytic derivative is below 1e-4 are held to ``atol``, all others
    to ``rtol``. ``max_checks`` samples that many entries per input.
    """
    for t in inputs:
        t.grad = None
    backward(fn())
    rng = np.random.default_rng(seed)
    checked = 0
    ok = True
    max_error = 0.0
    worst = ""
    for position, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        indices = np.arange(t.size)
        if max_checks is not None and t.size > max_checks:
            indices = rng.choice(t.size, size=max_checks, replace=False)
        for flat in indices:
            idx = np.unravel_index(int(flat), t.shape)
            original = t.data[idx]
            with no_grad():
                t.data[idx] = original + eps
                plus = fn().item()
                t.data[idx] = original - eps
                minus = fn().item()
            t.data[idx] = original
            numeric = (plus - minus) / (2 * eps)
            value = float(analytic[idx])
            err = abs(value - numeric)
            scale = max(abs(value), abs(numeric))
            if abs(value) < 1e-4:
                passed = err <= atol
                measure = err
            else:
                measure = err / scale
                passed = measure <= rtol
            checked += 1
            if measure > max_error:
                max_error = measure
                worst = f"input {position} at {idx}: analytic {value:.6g}, numeric {numeric:.6g}"
            ok = ok and passed
    return GradcheckResult(ok=ok, checked=checked, max_error=max_error, worst=worst)
