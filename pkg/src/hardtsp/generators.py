"""Instance generators and the solver-relative hardness measure.

Hardness compares the solver's expected tour length with that of a
surrogate: a copy of the solver pushed a few policy-gradient steps further
on the very instances being measured. The hardness-adaptive generator moves
instance coordinates uphill on that hardness, re-projecting onto the unit
square after every step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from hardtsp import autodiff as ad
from hardtsp.errors import ConfigError, DegenerateInstanceError, HardTspError, SingularGradientWarning
from hardtsp.policy import (
    PolicyModel,
    as_coords,
    decode,
    encode,
    make_generator,
    reinforce_gradient,
    rollout,
    solver_cost,
)
from hardtsp.tsp import TspInstance, batch_project, batch_tour_cost_gradient, project_unit_square

MAX_RESAMPLES = 10


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _instances(coords: np.ndarray, provenance: dict) -> list[TspInstance]:
    return [TspInstance(c, projected=True, provenance=dict(provenance, index=i))
            for i, c in enumerate(coords)]


def uniform_coords(n: int, count: int, rng) -> np.ndarray:
    if count < 1 or n < 3:
        raise ConfigError(f"need count >= 1 and n >= 3, got count={count}, n={n}")
    return _rng(rng).random((count, n, 2))


def gen_uniform(n: int, count: int, rng) -> list[TspInstance]:
    return _instances(uniform_coords(n, count, rng), {"generator": "uniform"})


@dataclass(frozen=True)
class GmmConfig:
    n: int = 20
    c_min: int = 3
    c_max: int = 7
    c_dist: float = 100.0

    def __post_init__(self):
        if not 1 <= self.c_min <= self.c_max:
            raise ConfigError(f"need 1 <= c_min <= c_max, got {self.c_min}, {self.c_max}")
        if self.c_dist < 0:
            raise ConfigError(f"c_dist must be non-negative, got {self.c_dist}")
        if self.n < 3:
            raise ConfigError("n must be at least 3")


def gmm_coords(config: GmmConfig, count: int, rng, return_clusters: bool = False):
    """Clustered point sets, min-max projected; redraws degenerate samples."""
    rng = _rng(rng)
    out = np.empty((count, config.n, 2))
    clusters = np.empty(count, dtype=np.int64)
    for i in range(count):
        for _ in range(MAX_RESAMPLES):
            n_c = int(rng.integers(config.c_min, config.c_max + 1))
            centers = rng.uniform(0.0, config.c_dist, size=(n_c, 2))
            member = rng.integers(0, n_c, size=config.n)
            raw = centers[member] + rng.standard_normal((config.n, 2))
            try:
                out[i] = project_unit_square(raw)
                clusters[i] = n_c
                break
            except DegenerateInstanceError:
                continue
        else:
            raise DegenerateInstanceError(-1, "Gaussian mixture sample degenerate after retries")
    return (out, clusters) if return_clusters else out


def gen_gaussian_mixture(config: GmmConfig, count: int, rng) -> list[TspInstance]:
    prov = {"generator": "gmm", "c_min": config.c_min, "c_max": config.c_max,
            "c_dist": config.c_dist}
    return _instances(gmm_coords(config, count, rng), prov)


@dataclass(frozen=True)
class SurrogateConfig:
    inner_steps: int = 1
    inner_lr: float = 1e-4
    samples: int = 1  # sampled tours per instance in each inner step

    def __post_init__(self):
        if self.inner_steps < 0 or self.inner_lr < 0 or self.samples < 1:
            raise ConfigError(f"invalid surrogate config {self}")


def surrogate_update(model: PolicyModel, batch, config: SurrogateConfig, rng=None,
                     baseline_costs=None) -> PolicyModel:
    """Copy of ``model`` advanced by a few REINFORCE steps on ``batch``.

    The copy starts from fresh Adam moments. Unless ``baseline_costs`` is
    given, the frozen original's greedy tour lengths serve as the baseline.
    Batch normalization stays in inference mode so that the surrogate is
    tuned for exactly the function used to score it.
    """
    surrogate = PolicyModel(model.config, model.store.copy())
    store = surrogate.store
    for name in store.params:
        store.exp_avg[name].zero_()
        store.exp_avg_sq[name].zero_()
    store.step = 0
    if config.inner_steps == 0 or config.inner_lr == 0:
        return surrogate
    coords = np.repeat(as_coords(batch), config.samples, axis=0)
    if baseline_costs is None:
        baseline_costs = rollout(coords, model, "greedy")
    else:
        baseline_costs = np.repeat(np.asarray(baseline_costs, dtype=np.float64), config.samples)
    gen = make_generator(rng if rng is not None else 0)
    for _ in range(config.inner_steps):
        terms = reinforce_gradient(coords, surrogate, None, gen, training=False,
                                   baseline_costs=baseline_costs)
        grads = ad.clip_gradients(terms.mean(), 1.0)
        ad.optimizer_step(store, grads, lr=config.inner_lr)
    return surrogate


@dataclass(frozen=True)
class HardnessReport:
    hardness: float
    solver_cost: float
    surrogate_cost: float

    @classmethod
    def from_costs(cls, solver: float, surrogate: float) -> "HardnessReport":
        if not surrogate > 0:
            raise HardTspError(f"surrogate cost must be positive, got {surrogate}")
        return cls((solver - surrogate) / surrogate, float(solver), float(surrogate))


def hardness(instances, model: PolicyModel, surrogate: PolicyModel, rollouts: int = 8,
             rng=None) -> list[HardnessReport]:
    """Relative improvement of ``surrogate`` over ``model``, per instance.

    Both costs are Monte-Carlo means over ``rollouts`` sampled tours; the two
    estimates use generators seeded identically, which makes a surrogate
    equal to the model score exactly zero.
    """
    rng = _rng(rng)
    seed = int(rng.integers(2 ** 62))
    c_model = solver_cost(instances, model, rollouts, seed)
    c_sur = solver_cost(instances, surrogate, rollouts, seed)
    return [HardnessReport.from_costs(a, b) for a, b in zip(c_model, c_sur)]


def hardness_gradient(instances, model: PolicyModel, surrogate_cost, rollouts: int = 8,
                      rng=None, centered: bool = False) -> np.ndarray:
    """Monte-Carlo gradient of hardness w.r.t. coordinates, shape (B, n, 2).

    Per sampled tour the estimate is ``C/C' * grad log p + grad C / C'`` with
    the surrogate cost ``C'`` held constant. ``centered=True`` subtracts the
    per-instance sample mean cost from the score-function weight.
    """
    coords = as_coords(instances)
    b, n, _ = coords.shape
    c_sur = np.broadcast_to(np.asarray(surrogate_cost, dtype=np.float64), (b,))
    if np.any(c_sur <= 0):
        raise HardTspError("surrogate cost must be positive")
    rep = np.repeat(coords, rollouts, axis=0)
    c_rep = np.repeat(c_sur, rollouts)
    x = torch.tensor(rep, requires_grad=True)
    res = decode(encode(x, model), model, "sample", make_generator(rng if rng is not None else 0))
    costs = res.costs
    weight = costs
    if centered:
        weight = costs - np.repeat(costs.reshape(b, rollouts).mean(axis=1), rollouts)
    weight = weight / c_rep
    (score,) = ad.backward((torch.from_numpy(weight) * res.log_prob).sum(), [x])
    tours = res.tours.numpy()
    path = np.take_along_axis(rep, tours[..., None], axis=1)
    if np.any(np.all(path == np.roll(path, -1, axis=1), axis=2)):
        warnings.warn("coincident adjacent tour nodes; using a zero edge direction",
                      SingularGradientWarning, stacklevel=2)
    cost_grad = batch_tour_cost_gradient(rep, tours) / c_rep[:, None, None]
    total = score.numpy() + cost_grad
    return total.reshape(b, rollouts, n, 2).mean(axis=1)


@dataclass(frozen=True)
class HagConfig:
    n: int = 20
    eta: float = 5.0
    steps: int = 4
    rollouts: int = 8
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    centered: bool = False
    noise: float = 0.0  # std of optional Gaussian perturbation per step
    batch_size: int = 128

    def __post_init__(self):
        if self.eta < 0 or self.steps < 1 or self.rollouts < 1 or self.batch_size < 1:
            raise ConfigError(f"invalid hardness-adaptive config {self}")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")


def hag_coords(model: PolicyModel, config: HagConfig, count: int, rng) -> np.ndarray:
    rng = _rng(rng)
    coords = uniform_coords(config.n, count, rng)
    if config.eta == 0 and config.noise == 0:
        return coords
    gen = make_generator(rng)
    resamples = np.zeros(count, dtype=np.int64)
    for lo in range(0, count, config.batch_size):
        x = coords[lo:lo + config.batch_size]
        for _ in range(config.steps):
            sur = surrogate_update(model, x, config.surrogate, gen)
            c_sur = solver_cost(x, sur, config.rollouts, gen)
            grad = hardness_gradient(x, model, c_sur, config.rollouts, gen, config.centered)
            moved = x + config.eta * grad
            if config.noise:
                moved = moved + config.noise * rng.standard_normal(moved.shape)
            x, bad = batch_project(moved)
            for i in np.flatnonzero(bad):
                resamples[lo + i] += 1
                if resamples[lo + i] > MAX_RESAMPLES:
                    raise DegenerateInstanceError(-1, "hardness ascent keeps degenerating")
                x[i] = rng.random((config.n, 2))
        coords[lo:lo + config.batch_size] = x
    return coords


def gen_hardness_adaptive(model: PolicyModel, config: HagConfig, count: int, rng) -> list[TspInstance]:
    prov = {"generator": "hag", "eta": config.eta, "steps": config.steps}
    if not isinstance(rng, np.random.Generator):
        prov["seed"] = rng
    return _instances(hag_coords(model, config, count, rng), prov)
