"""Synthetic multiscale field generator.

A desk-scale surrogate with the same structure the cross-scale architecture
targets: a slow coherent oscillation spanning the domain, a traveling wave at
an intermediate scale, and per-cell chaotic residuals that spatial averaging
suppresses. Components sum; everything is deterministic in the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import rng
from .errors import ConfigError
from .field import GridSeries


@dataclass(frozen=True)
class GlobalOscillation:
    """amplitude * sin(2 pi t / period + phase(row)).

    phase_gradient (radians) ramps the phase linearly from the first row to
    the last, seasonal-cycle style; 0 keeps the field spatially uniform (and
    rank 1); a nonzero ramp makes the component exactly rank 2.
    """

    amplitude: float
    period: float
    phase_gradient: float = 0.0

    def validate(self):
        if not np.isfinite(self.amplitude):
            raise ConfigError("global_oscillation amplitude must be finite")
        if self.period <= 0:
            raise ConfigError(f"global_oscillation period must be > 0, got {self.period}")
        return self


@dataclass(frozen=True)
class TravelingWave:
    """amplitude * sin(2 pi (x - speed * t) / wavelength) along one axis.

    speed is in cells per frame; the temporal period is wavelength / speed.
    """

    amplitude: float
    wavelength: float
    speed: float
    axis: str = "col"

    def validate(self):
        if not np.isfinite(self.amplitude):
            raise ConfigError("traveling_wave amplitude must be finite")
        if self.wavelength <= 0:
            raise ConfigError(f"traveling_wave wavelength must be > 0, got {self.wavelength}")
        if not np.isfinite(self.speed):
            raise ConfigError("traveling_wave speed must be finite")
        if self.axis not in ("row", "col"):
            raise ConfigError(f"traveling_wave axis must be row|col, got {self.axis}")
        return self


@dataclass(frozen=True)
class LocalChaos:
    """Per-cell logistic-map iterates x' = mu x (1 - x), rescaled to
    [-amplitude, amplitude], spatially uncorrelated."""

    amplitude: float
    mu: float
    transient: int = 100

    def validate(self):
        if not np.isfinite(self.amplitude):
            raise ConfigError("local_chaos amplitude must be finite")
        if not (0.0 < self.mu <= 4.0):
            raise ConfigError(f"local_chaos mu must be in (0, 4], got {self.mu}")
        if self.transient < 0:
            raise ConfigError("local_chaos transient must be >= 0")
        return self


@dataclass(frozen=True)
class SynthSpec:
    grid_rows: int
    grid_cols: int
    n_time: int
    components: tuple
    seed: int
    mask_rects: tuple = ()  # (row0, col0, row1, col1) half-open land boxes
    dt: float = 1.0

    def validate(self):
        if min(self.grid_rows, self.grid_cols, self.n_time) < 1:
            raise ConfigError("grid dims and n_time must be >= 1")
        if not self.components:
            raise ConfigError("at least one component is required")
        for comp in self.components:
            comp.validate()
        for rect in self.mask_rects:
            r0, c0, r1, c1 = rect
            if not (0 <= r0 < r1 <= self.grid_rows and 0 <= c0 < c1 <= self.grid_cols):
                raise ConfigError(f"mask rectangle {rect} out of bounds")
        return self


def _logistic_series(spec: SynthSpec, comp: LocalChaos) -> np.ndarray:
    cells = spec.grid_rows * spec.grid_cols
    gen = rng.stream(spec.seed, "chaos")
    x = gen.uniform(0.05, 0.95, cells)
    for _ in range(comp.transient):
        x = comp.mu * x * (1.0 - x)
    out = np.empty((spec.n_time, cells))
    for t in range(spec.n_time):
        x = comp.mu * x * (1.0 - x)
        out[t] = x
    return comp.amplitude * (2.0 * out - 1.0)


def gen_multiscale_synthetic(spec: SynthSpec) -> GridSeries:
    """Sum the spec's components into a GridSeries (deterministic in seed)."""
    spec.validate()
    t = np.arange(spec.n_time, dtype=np.float64)
    rows = np.arange(spec.grid_rows, dtype=np.float64)
    cols = np.arange(spec.grid_cols, dtype=np.float64)
    values = np.zeros((spec.n_time, spec.grid_rows, spec.grid_cols))
    for comp in spec.components:
        if isinstance(comp, GlobalOscillation):
            phase = (
                comp.phase_gradient * rows / max(spec.grid_rows - 1, 1)
            )[None, :, None]
            values += comp.amplitude * np.sin(
                2.0 * np.pi * t[:, None, None] / comp.period + phase
            )
        elif isinstance(comp, TravelingWave):
            coord = rows[None, :, None] if comp.axis == "row" else cols[None, None, :]
            values += comp.amplitude * np.sin(
                2.0 * np.pi * (coord - comp.speed * t[:, None, None]) / comp.wavelength
            )
        elif isinstance(comp, LocalChaos):
            values += _logistic_series(spec, comp).reshape(values.shape)
        else:
            raise ConfigError(f"unknown component type {type(comp).__name__}")
    mask = np.ones((spec.grid_rows, spec.grid_cols), dtype=bool)
    for r0, c0, r1, c1 in spec.mask_rects:
        mask[r0:r1, c0:c1] = False
    return GridSeries(values, mask, dt=spec.dt)
