"""Finite-difference certification of analytic gradients.

Run in float64. For each sampled parameter coordinate the analytic gradient
is compared against the central difference (f(p+h) - f(p-h)) / 2h with
relative error |a - n| / max(|a|, |n|, 1e-8).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Var, backward
from .errors import NumericError


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    coords_checked: int


@dataclass
class GradCheckReport:
    per_param: list[ParamCheck]

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.per_param), default=0.0)

    def worst(self) -> ParamCheck:
        return max(self.per_param, key=lambda p: p.max_rel_err)


def check_gradients(
    build_loss,
    params: list[Parameter],
    h: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() gradients of build_loss() against central differences.

    build_loss must construct a fresh tape and return the scalar loss Var;
    tensors with more than max_coords entries are checked on a seeded uniform
    sample of coordinates.
    """
    loss = build_loss()
    backward(loss.tape, loss)
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    results = []
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        a_flat = analytic[p.name].reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = float(build_loss().value)
            flat[idx] = orig - h
            f_minus = float(build_loss().value)
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(
                    f"non-finite loss while perturbing {p.name}[{idx}]"
                )
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(a_flat[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        results.append(ParamCheck(p.name, worst, len(coords)))
    return GradCheckReport(results)
