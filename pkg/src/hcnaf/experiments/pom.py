"""Desk-scale occupancy forecasting: a point agent drives north toward an
intersection and commits to a branch; the model must recover the analytic
future-position mixture from a rasterized road map, the approach history, and
the forecast horizon.

Scenario identity is carried entirely by the geometry channel: the symmetric
scenario is a T-junction (no north arm, equal arms), the biased scenarios are
crossroads whose favored arm is drawn wider. The ground-truth distribution of
the position at horizon dt is an exact Gaussian mixture over branches, which
makes per-cell KL checks possible without any reference run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor_core import logsumexp
from ..training import ConditionedSamples
from .metrics import Episode

LN_2PI = float(np.log(2.0 * np.pi))

WORLD_HALF_SPAN = 8.0
GRID_CELLS = 32
SPEED = 1.0
APPROACH_DIST = 2.0  # distance from the current position to the junction
HISTORY_LEN = 5
NOISE_RATE = 0.15  # positional noise grows linearly with the horizon
HORIZONS = (1.0, 2.0, 3.0, 4.0)

# branch unit directions past the junction at the origin
_BRANCH_DIRS = {"left": (-1.0, 0.0), "straight": (0.0, 1.0), "right": (1.0, 0.0)}


@dataclass(frozen=True)
class Scenario:
    name: str
    branch_probs: dict  # branch -> probability
    arm_halfwidth: dict  # compass arm -> halfwidth drawn in the raster

    @property
    def branches(self):
        return sorted(b for b, p in self.branch_probs.items() if p > 0)


SCENARIOS = {
    0: Scenario(
        name="tee_symmetric",
        branch_probs={"left": 0.5, "right": 0.5},
        arm_halfwidth={"south": 0.75, "west": 0.75, "east": 0.75},
    ),
    1: Scenario(
        name="cross_left_heavy",
        branch_probs={"left": 0.6, "straight": 0.3, "right": 0.1},
        arm_halfwidth={"south": 0.75, "west": 1.5, "east": 0.5, "north": 0.75},
    ),
    2: Scenario(
        name="cross_right_heavy",
        branch_probs={"left": 0.1, "straight": 0.3, "right": 0.6},
        arm_halfwidth={"south": 0.75, "west": 0.5, "east": 1.5, "north": 0.75},
    ),
}


@dataclass
class ToyScene:
    """One conditioned example: the rasterized road map, the agent's approach
    history, the forecast horizon, and the observed future position."""

    grid: np.ndarray  # (32, 32) binary, row 0 at y = +8
    history: np.ndarray  # (5, 2) positions at t = -4..0 seconds
    dt: float
    target: np.ndarray  # (2,) position at t = dt
    scenario: int

    def __post_init__(self):
        if self.grid.shape != (GRID_CELLS, GRID_CELLS):
            raise ValueError("grid must be 32x32")
        if self.history.shape != (HISTORY_LEN, 2):
            raise ValueError(f"history must hold {HISTORY_LEN} positions")
        if np.max(np.abs(self.target)) > WORLD_HALF_SPAN:
            raise ValueError("target lies outside the world extent")


def raster_road(scenario: Scenario):
    """Binary occupancy of the road surface on the 32x32 cell centers."""
    step = 2 * WORLD_HALF_SPAN / GRID_CELLS
    centers = -WORLD_HALF_SPAN + step * (np.arange(GRID_CELLS) + 0.5)
    xs, ys = np.meshgrid(centers, centers[::-1])  # row 0 at y max
    road = np.zeros((GRID_CELLS, GRID_CELLS), dtype=bool)
    for arm, half in scenario.arm_halfwidth.items():
        if arm == "south":
            road |= (np.abs(xs) <= half) & (ys <= 0)
        elif arm == "north":
            road |= (np.abs(xs) <= half) & (ys >= 0)
        elif arm == "west":
            road |= (np.abs(ys) <= half) & (xs <= 0)
        elif arm == "east":
            road |= (np.abs(ys) <= half) & (xs >= 0)
    return road.astype(np.uint8)


def approach_history():
    """Positions at t = -4..0 s while driving north toward the junction."""
    times = np.arange(-(HISTORY_LEN - 1), 1, dtype=np.float64)
    ys = -APPROACH_DIST + SPEED * times
    return np.column_stack([np.zeros(HISTORY_LEN), ys])


def branch_position(branch, dt):
    """Noise-free position after driving dt seconds along a branch."""
    s = SPEED * dt
    if s <= APPROACH_DIST:
        return np.array([0.0, -APPROACH_DIST + s])
    past = s - APPROACH_DIST
    dx, dy = _BRANCH_DIRS[branch]
    return np.array([dx * past, dy * past])


def pom_mixture(scenario_id, dt):
    """(weights, means, sigma) of the exact future-position mixture."""
    sc = SCENARIOS[scenario_id]
    weights = np.array([sc.branch_probs[b] for b in sc.branches])
    means = np.stack([branch_position(b, dt) for b in sc.branches])
    return weights, means, NOISE_RATE * dt


def pom_log_pdf(scenario_id, dt, xy):
    """Exact mixture log-density of the position at horizon dt."""
    weights, means, sigma = pom_mixture(scenario_id, dt)
    if sigma <= 0:
        raise ValueError("degenerate horizon has no density")
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    diff = xy[:, None, :] - means[None, :, :]
    comp = -0.5 * np.sum(diff * diff, axis=2) / sigma**2 - LN_2PI - 2 * np.log(sigma)
    return logsumexp(comp + np.log(weights)[None, :], axis=1)


def _sample_branches(scenario: Scenario, n, rng):
    names = scenario.branches
    probs = np.array([scenario.branch_probs[b] for b in names])
    return [names[i] for i in rng.choice(len(names), size=n, p=probs)]


def canonical_scene(scenario_id, dt):
    """The deterministic context for one (scenario, horizon) cell; the target
    field is a placeholder (noise-free straight-ahead continuation)."""
    sc = SCENARIOS[scenario_id]
    target = branch_position(sc.branches[0], dt) if dt > 0 else np.array([0.0, -APPROACH_DIST])
    return ToyScene(
        grid=raster_road(sc),
        history=approach_history(),
        dt=float(dt),
        target=target,
        scenario=scenario_id,
    )


def gen_toy_pom(n_scenes, seed, scenario=None, dt=None):
    """Seeded scenes: scenario and horizon drawn uniformly unless pinned; the
    branch follows the scenario's probabilities; the target gets positional
    noise proportional to the horizon (a horizon of 0 collapses to the
    current position)."""
    rng = np.random.default_rng(int(seed))
    scenario_ids = (
        np.full(n_scenes, scenario, dtype=int)
        if scenario is not None
        else rng.integers(0, len(SCENARIOS), size=n_scenes)
    )
    dts = np.full(n_scenes, float(dt)) if dt is not None else rng.choice(HORIZONS, size=n_scenes)
    scenes = []
    for sid, horizon in zip(scenario_ids, dts):
        sc = SCENARIOS[int(sid)]
        branch = _sample_branches(sc, 1, rng)[0]
        mean = branch_position(branch, horizon)
        target = mean + NOISE_RATE * horizon * rng.standard_normal(2)
        scenes.append(
            ToyScene(
                grid=raster_road(sc),
                history=approach_history(),
                dt=float(horizon),
                target=target,
                scenario=int(sid),
            )
        )
    return scenes


def condition_vector(scene: ToyScene):
    """Flattened occupancy map, scaled history, and scaled horizon."""
    return np.concatenate(
        [
            scene.grid.astype(np.float64).ravel(),
            scene.history.ravel() / WORLD_HALF_SPAN,
            [scene.dt / max(HORIZONS)],
        ]
    )


COND_DIM = GRID_CELLS * GRID_CELLS + 2 * HISTORY_LEN + 1


def scenes_to_dataset(scenes):
    x = np.stack([s.target for s in scenes])
    cond = np.stack([condition_vector(s) for s in scenes])
    return ConditionedSamples(x, cond)


def episodes_for_scenario(scenario_id, n_episodes, seed):
    """Episodes over the full horizon set: one branch per episode, positions
    at every horizon with the generator's noise, conditions per step."""
    rng = np.random.default_rng(int(seed))
    sc = SCENARIOS[scenario_id]
    conds = [condition_vector(canonical_scene(scenario_id, t)) for t in HORIZONS]
    episodes = []
    for branch in _sample_branches(sc, n_episodes, rng):
        positions = np.stack(
            [branch_position(branch, t) + NOISE_RATE * t * rng.standard_normal(2) for t in HORIZONS]
        )
        episodes.append(Episode(conditions=conds, positions=positions))
    return episodes
