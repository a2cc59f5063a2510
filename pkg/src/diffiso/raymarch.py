"""Front-to-back volume compositing along a single ray."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RaySampleSet", "volume_render_ray"]


@dataclass(frozen=True)
class RaySampleSet:
    """Ordered samples along one ray: densities, step sizes, colors.

    density has units 1/length, step is the marching step in length units,
    color is RGB in [0, 1].
    """

    density: np.ndarray
    step: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        density = np.asarray(self.density, dtype=np.float64).reshape(-1)
        step = np.asarray(self.step, dtype=np.float64).reshape(-1)
        color = np.asarray(self.color, dtype=np.float64).reshape(-1, 3)
        if not (len(density) == len(step) == len(color)):
            raise ValueError("density, step and color must have equal lengths")
        if np.any(density < 0):
            raise ValueError("densities must be non-negative")
        if np.any(step <= 0):
            raise ValueError("step sizes must be positive")
        if np.any(color < 0) or np.any(color > 1):
            raise ValueError("colors must lie in [0, 1]")
        object.__setattr__(self, "density", density)
        object.__setattr__(self, "step", step)
        object.__setattr__(self, "color", color)

    def __len__(self):
        return len(self.density)


def volume_render_ray(samples: RaySampleSet):
    """Composite the samples front to back.

    Returns (color, final_transmittance) with
    color = sum_i T_i * (1 - exp(-density_i * step_i)) * color_i and
    T_i = exp(-sum_{j<i} density_j * step_j).
    """
    tau = samples.density * samples.step
    prefix = np.concatenate([[0.0], np.cumsum(tau)])
    transmittance = np.exp(-prefix)          # T_1 .. T_{N+1}
    alpha = 1.0 - np.exp(-tau)
    weights = transmittance[:-1] * alpha
    color = weights @ samples.color
    return color, float(transmittance[-1])
