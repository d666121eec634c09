"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: list[float]
    tol: float
    errors: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_error)
        return f"grad_check {verdict} (tol {self.tol:g}): max rel err per input [{errs}]"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() of ``fn(*inputs)`` with central differences.

    ``fn`` must return a scalar tensor. Relative error per coordinate is
    |a - n| / max(1, |a|, |n|). With ``max_coords`` only a seeded random
    subset of each input's coordinates is perturbed. Runs in 64-bit and never
    raises for a mismatch or a failing evaluation; both land in the report.
    """
    rng = np.random.default_rng(seed)
    with precision(64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        try:
            leaves = [Tensor(a, requires_grad=True) for a in arrays]
            out = fn(*leaves)
            if out.size != 1:
                raise ValueError(f"grad_check needs a scalar output, got shape {out.shape}")
            out.backward()
        except Exception as exc:  # report, never abort
            return GradCheckReport(False, [float("inf")] * len(arrays), tol, [repr(exc)])

        def evaluate(vals) -> float:
            return fn(*[Tensor(v) for v in vals]).item()

        report_errs: list[float] = []
        errors: list[str] = []
        for idx, (leaf, base) in enumerate(zip(leaves, arrays)):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
            flat_count = base.size
            coords = np.arange(flat_count)
            if max_coords is not None and flat_count > max_coords:
                coords = np.sort(rng.choice(flat_count, size=max_coords, replace=False))
            worst = 0.0
            for c in coords:
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[idx].reshape(-1)[c] += h
                minus[idx].reshape(-1)[c] -= h
                try:
                    numeric = (evaluate(plus) - evaluate(minus)) / (2 * h)
                except Exception as exc:
                    errors.append(f"input {idx} coord {c}: {exc!r}")
                    worst = float("inf")
                    continue
                a = float(analytic.reshape(-1)[c])
                rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, rel)
            report_errs.append(worst)
    passed = not errors and all(e < tol for e in report_errs)
    return GradCheckReport(passed, report_errs, tol, errors)
