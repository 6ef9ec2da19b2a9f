"""Toy Gaussian targets: grids of well-separated modes selected by a scalar
class condition, and a single isotropic Gaussian whose mean is the condition.

The grid layout is not pinned down by any published numbers, so we place the
k-by-k means on an even lattice over [-4, 4]^2 with sigma at 15% of the
lattice spacing: modes stay visually distinct for every k while a single
moment-matched Gaussian (the affine baseline's optimum) is clearly worse than
the mixture itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor_core import logsumexp
from ..training import ConditionedSamples

LN_2PI = float(np.log(2.0 * np.pi))

# scalar class condition for the standard grid sizes
GRID_CLASS_INDEX = {2: 0.0, 5: 1.0, 10: 2.0}
SIGMA_TO_SPACING = 0.15
LATTICE_HALF_SPAN = 4.0


@dataclass(frozen=True)
class GridGaussianSpec:
    """k-by-k grid of isotropic Gaussians, mixed uniformly."""

    k: int
    means: np.ndarray
    sigma: float
    extent: tuple

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        m = np.asarray(self.means, dtype=np.float64)
        if m.shape != (self.k * self.k, 2):
            raise ValueError(f"means must have shape {(self.k * self.k, 2)}")
        if len(np.unique(m, axis=0)) != m.shape[0]:
            raise ValueError("means must be pairwise distinct")
        object.__setattr__(self, "means", m)

    @classmethod
    def lattice(cls, k):
        axis = np.linspace(-LATTICE_HALF_SPAN, LATTICE_HALF_SPAN, k)
        xx, yy = np.meshgrid(axis, axis)
        means = np.column_stack([xx.ravel(), yy.ravel()])
        spacing = 2 * LATTICE_HALF_SPAN / (k - 1)
        sigma = SIGMA_TO_SPACING * spacing
        margin = LATTICE_HALF_SPAN + 4 * sigma
        return cls(k=k, means=means, sigma=sigma, extent=((-margin, margin), (-margin, margin)))

    @property
    def condition_value(self):
        return GRID_CLASS_INDEX.get(self.k)


def grid_mixture_log_pdf(spec: GridGaussianSpec, xy):
    """Exact mixture log-density, the oracle for entropies and KL checks."""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    diff = xy[:, None, :] - spec.means[None, :, :]
    comp = -0.5 * np.sum(diff * diff, axis=2) / spec.sigma**2 - LN_2PI - 2 * np.log(spec.sigma)
    return logsumexp(comp, axis=1) - np.log(spec.means.shape[0])


def sample_grid_mixture(spec: GridGaussianSpec, n, rng):
    comp = rng.integers(0, spec.means.shape[0], size=n)
    return spec.means[comp] + spec.sigma * rng.standard_normal((n, 2))


def gen_grid_gaussians(spec: GridGaussianSpec, n, seed, condition_value=None):
    """Seeded draw of n mixture samples paired with the grid's class index."""
    if condition_value is None:
        condition_value = spec.condition_value
        if condition_value is None:
            raise ValueError(f"no standard class index for k={spec.k}; pass condition_value")
    rng = np.random.default_rng(int(seed))
    x = sample_grid_mixture(spec, n, rng)
    return ConditionedSamples(x, np.full((n, 1), float(condition_value)))


def mc_entropy(spec: GridGaussianSpec, n=1_000_000, seed=0):
    """Monte-Carlo differential entropy of the mixture with its standard error;
    the NLL floor for models trained on this grid."""
    rng = np.random.default_rng(int(seed))
    vals = -grid_mixture_log_pdf(spec, sample_grid_mixture(spec, n, rng))
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n))


def _default_train_conditions():
    return np.array([[0.0, 0.0], [2.0, 2.0], [2.0, -2.0], [-2.0, 2.0], [-2.0, -2.0]])


def _default_unseen_conditions():
    return np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0], [0.0, -2.0]])


@dataclass(frozen=True)
class CondGaussianSpec:
    """Isotropic Gaussian whose 2-D mean is the condition; trained on five
    means, probed on four midpoints it never saw."""

    c_train: np.ndarray = field(default_factory=_default_train_conditions)
    c_unseen: np.ndarray = field(default_factory=_default_unseen_conditions)
    sigma: float = 0.5

    def __post_init__(self):
        train = {tuple(row) for row in np.asarray(self.c_train)}
        unseen = {tuple(row) for row in np.asarray(self.c_unseen)}
        if train & unseen:
            raise ValueError("unseen conditions must be disjoint from training conditions")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def gen_conditional_gaussian(spec: CondGaussianSpec, c, n, seed):
    """n draws from N(c, sigma^2 I)."""
    rng = np.random.default_rng(int(seed))
    return np.asarray(c, dtype=np.float64) + spec.sigma * rng.standard_normal((n, 2))


def cond_gaussian_log_pdf(spec: CondGaussianSpec, c, xy):
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    diff = xy - np.asarray(c, dtype=np.float64)
    return -0.5 * np.sum(diff * diff, axis=1) / spec.sigma**2 - LN_2PI - 2 * np.log(spec.sigma)


def gaussian_entropy(sigma):
    """Differential entropy of an isotropic bivariate Gaussian,
    0.5 * ln((2 pi e sigma^2)^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return float(np.log(2.0 * np.pi * np.e * sigma**2))


def toy2_dataset(spec: CondGaussianSpec, n_per_condition, seed):
    """Training set over the five training means, conditions attached."""
    parts = []
    for i, c in enumerate(np.asarray(spec.c_train)):
        x = gen_conditional_gaussian(spec, c, n_per_condition, seed + 1000 * i)
        parts.append(ConditionedSamples(x, np.tile(c, (n_per_condition, 1))))
    return ConditionedSamples.concatenate(parts)
