"""Central finite-difference gradient checks against the reverse-mode engine."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    checked_entries: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_err.values())

    @property
    def worst(self) -> tuple[str, float]:
        if not self.max_rel_err:
            return ("", 0.0)
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]

    def by_group(self, depth: int = 2) -> dict[str, float]:
        groups: dict[str, float] = {}
        for name, err in self.max_rel_err.items():
            key = ".".join(name.split(".")[:depth])
            groups[key] = max(groups.get(key, 0.0), err)
        return groups


def _scalar(value: Tensor) -> float:
    out = float(np.asarray(value.data).reshape(-1)[0])
    if value.size != 1:
        raise ValueError("gradient check needs a scalar function")
    if not np.isfinite(out):
        raise FloatingPointError("function evaluated to a non-finite value")
    return out


def check_gradients(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    directions: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() gradients with central differences.

    Relative error per check is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8);
    the report keeps the max per parameter.

    Default mode sweeps every entry. ``max_entries`` samples that many
    coordinates per parameter instead. ``directions`` switches to directional
    derivatives: each parameter is perturbed along that many unit directions
    (a random unit vector tilted toward the analytic gradient), comparing
    u . grad with (f(p + h u) - f(p - h u)) / 2h. The
    directional mode touches every entry at once and keeps the compared
    quantity well above the ~1e-10 roundoff floor of the difference quotient,
    which individual near-zero gradient entries cannot.
    """
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    loss = f(params)
    _scalar(loss)
    loss.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            if directions:
                report.max_rel_err[name] = _directional(f, params, flat, analytic[name].reshape(-1), h, directions, rng)
                report.checked_entries[name] = int(flat.size)
                continue
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            else:
                idx = np.arange(flat.size)
            g_ad = analytic[name].reshape(-1)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = _scalar(f(params))
                flat[i] = orig - h
                fm = _scalar(f(params))
                flat[i] = orig
                g_fd = (fp - fm) / (2.0 * h)
                err = abs(g_ad[i] - g_fd) / max(abs(g_ad[i]), abs(g_fd), 1e-8)
                worst = max(worst, err)
            report.max_rel_err[name] = worst
            report.checked_entries[name] = int(idx.size)
    return report


def _directional(f, params, flat, g_ad, h, directions, rng) -> float:
    worst = 0.0
    orig = flat.copy()
    for _ in range(directions):
        u = rng.standard_normal(flat.size)
        u /= np.linalg.norm(u)
        gnorm = np.linalg.norm(g_ad)
        if gnorm > 0:
            # tilt toward the analytic gradient so u . g stays far above FD roundoff;
            # the random half still exposes errors orthogonal to g_ad
            tilted = u + g_ad / gnorm
            tnorm = np.linalg.norm(tilted)
            u = tilted / tnorm if tnorm > 1e-6 else g_ad / gnorm
        flat[:] = orig + h * u
        fp = _scalar(f(params))
        flat[:] = orig - h * u
        fm = _scalar(f(params))
        flat[:] = orig
        g_fd = (fp - fm) / (2.0 * h)
        g_dir = float(u @ g_ad)
        worst = max(worst, abs(g_dir - g_fd) / max(abs(g_dir), abs(g_fd), 1e-8))
    return worst
