"""Learning-rate schedules: cosine annealing and cosine power annealing.

Cosine power annealing blends the cosine curve with exponential decay
through an exponent p; p = 1 is an exact special case that dispatches to
plain cosine annealing, avoiding the 0/0 in the normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "AnnealSpec",
    "SCHEDULE_KINDS",
    "anneal",
    "cosine_anneal",
    "cosine_power_anneal",
    "emit_schedule",
    "write_schedule_csv",
    "read_schedule_csv",
]

SCHEDULE_KINDS = ("cosine", "power")


@dataclass(frozen=True)
class AnnealSpec:
    """One annealing run: exponent p, learning-rate range, and total epochs."""

    p: float
    eta_min: float
    eta_max: float
    epochs: int

    def __post_init__(self):
        if self.p <= 0:
            raise ValueError(f"annealing exponent must be positive, got {self.p}")
        if not 0 <= self.eta_min <= self.eta_max:
            raise ValueError(
                f"need 0 <= eta_min <= eta_max, got {self.eta_min}, {self.eta_max}"
            )
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


def _check_epoch(spec: AnnealSpec, t: int) -> None:
    if not 0 <= t <= spec.epochs:
        raise ValueError(f"epoch {t} outside [0, {spec.epochs}]")


def cosine_anneal(spec: AnnealSpec, t: int) -> float:
    """eta_min + (eta_max - eta_min) (1 + cos(pi t/T)) / 2."""
    _check_epoch(spec, t)
    cos = math.cos(math.pi * t / spec.epochs)
    return spec.eta_min + 0.5 * (spec.eta_max - spec.eta_min) * (1.0 + cos)


def cosine_power_anneal(spec: AnnealSpec, t: int) -> float:
    """eta_min + (eta_max - eta_min) (p^(u+1) - p) / (p^2 - p), u the cosine term."""
    _check_epoch(spec, t)
    p = spec.p
    if p == 1.0:
        return cosine_anneal(spec, t)
    u = 0.5 * (1.0 + math.cos(math.pi * t / spec.epochs))
    ratio = (p ** (u + 1.0) - p) / (p ** 2.0 - p)
    return spec.eta_min + (spec.eta_max - spec.eta_min) * ratio


def anneal(spec: AnnealSpec, t: int, kind: str) -> float:
    if kind == "cosine":
        return cosine_anneal(spec, t)
    if kind == "power":
        return cosine_power_anneal(spec, t)
    raise ValueError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")


def emit_schedule(spec: AnnealSpec, kind: str) -> list[tuple[int, float]]:
    """One (epoch, lr) row per epoch 0..T inclusive."""
    return [(t, anneal(spec, t, kind)) for t in range(spec.epochs + 1)]


def write_schedule_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,lr\n")
        for epoch, lr in rows:
            fh.write(f"{epoch},{lr:.17g}\n")


def read_schedule_csv(path) -> list[tuple[int, float]]:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "epoch,lr":
            raise ValueError(f"unexpected schedule header {header!r}")
        rows = []
        for line in fh:
            epoch, lr = line.strip().split(",")
            rows.append((int(epoch), float(lr)))
    return rows
