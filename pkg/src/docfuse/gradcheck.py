"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import DeterminismError
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    entries_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def summary(self) -> str:
        worst = max(self.per_param, key=self.per_param.get) if self.per_param else "-"
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_err={self.max_rel_error:.3e} (tol {self.tol:.0e}) "
            f"over {self.entries_checked} entries; worst param: {worst}"
        )


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    ``f`` closes over ``params`` and must be deterministic. Every entry of every
    parameter is perturbed unless ``max_entries`` caps the count per tensor, in
    which case a seeded subset is drawn. The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    base = loss.item()
    if f().item() != base:
        raise DeterminismError("f() returned different values on identical inputs")
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"parameter {name} is not contiguous")
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(float(ga[i]), numeric, floor))
        report.per_param[name] = worst
        report.entries_checked += len(idx)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
