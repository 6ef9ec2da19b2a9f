"""Dataset generators, metrics, and scripted reproductions of the
desk-scale experiments."""

from .gaussians import (
    CondGaussianSpec,
    GridGaussianSpec,
    gaussian_entropy,
    gen_conditional_gaussian,
    gen_grid_gaussians,
    grid_mixture_log_pdf,
    mc_entropy,
)
from .grids import DensityGrid, density_grid, grid_to_csv, grid_to_pgm
from .metrics import DensityStub, Episode, eval_nll, extra_nats, h_eta, kl_estimate
from .pom import (
    SCENARIOS,
    ToyScene,
    canonical_scene,
    condition_vector,
    episodes_for_scenario,
    gen_toy_pom,
    pom_log_pdf,
    pom_mixture,
    scenes_to_dataset,
)
from .digits import (
    bits_per_pixel,
    dequantize_logit,
    label_mixture_log_prob,
    load_idx,
    logit_to_pixels,
    save_idx,
)

__all__ = [
    "CondGaussianSpec",
    "GridGaussianSpec",
    "gaussian_entropy",
    "gen_conditional_gaussian",
    "gen_grid_gaussians",
    "grid_mixture_log_pdf",
    "mc_entropy",
    "DensityGrid",
    "density_grid",
    "grid_to_csv",
    "grid_to_pgm",
    "DensityStub",
    "Episode",
    "eval_nll",
    "extra_nats",
    "h_eta",
    "kl_estimate",
    "SCENARIOS",
    "ToyScene",
    "canonical_scene",
    "condition_vector",
    "episodes_for_scenario",
    "gen_toy_pom",
    "pom_log_pdf",
    "pom_mixture",
    "scenes_to_dataset",
    "bits_per_pixel",
    "dequantize_logit",
    "label_mixture_log_prob",
    "load_idx",
    "logit_to_pixels",
    "save_idx",
]
