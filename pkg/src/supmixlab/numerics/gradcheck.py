"""Central finite-difference gradient probes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor


@dataclass
class ProbeResult:
    index: tuple[int, ...]
    analytic: float
    numeric: float

    def ok(self, rtol: float, atol: float) -> bool:
        diff = abs(self.analytic - self.numeric)
        scale = max(abs(self.analytic), abs(self.numeric))
        return diff <= max(rtol * scale, atol)


def check_gradient(
    fn: Callable[[], Tensor],
    wrt: Tensor,
    rng: np.random.Generator,
    probes: int = 20,
    eps: float = 1e-6,
) -> list[ProbeResult]:
    """Compare d fn() / d wrt at randomly chosen entries with central differences.

    ``fn`` must rebuild its graph from ``wrt.data`` on every call and return a
    scalar tensor. ``wrt`` should be float64 for the probes to be meaningful.
    """
    wrt.grad = None
    out = fn()
    out.backward()
    analytic = np.zeros_like(wrt.data) if wrt.grad is None else wrt.grad.copy()

    flat = rng.choice(wrt.data.size, size=min(probes, wrt.data.size), replace=False)
    results = []
    base = wrt.data
    for f in flat:
        idx = np.unravel_index(int(f), base.shape)
        plus = base.copy()
        plus[idx] += eps
        minus = base.copy()
        minus[idx] -= eps
        wrt.data = plus
        fp = fn().item()
        wrt.data = minus
        fm = fn().item()
        wrt.data = base
        results.append(ProbeResult(tuple(int(i) for i in idx), float(analytic[idx]), (fp - fm) / (2 * eps)))
    wrt.grad = None
    return results


def all_close(results: list[ProbeResult], rtol: float, atol: float = 1e-6) -> bool:
    return all(r.ok(rtol, atol) for r in results)
