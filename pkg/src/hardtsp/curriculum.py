"""Hardness-weighted curriculum training.

Each batch is scored for hardness, turned into softmax sample weights at the
current temperature, and the per-instance policy gradients are combined with
those weights. The temperature moves geometrically once per epoch.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from hardtsp import autodiff as ad
from hardtsp.errors import (
    BatchShapeError,
    CheckpointCompatibilityError,
    ConfigError,
    HardTspError,
)
from hardtsp.generators import (
    GmmConfig,
    HagConfig,
    SurrogateConfig,
    gmm_coords,
    hag_coords,
    hardness,
    surrogate_update,
    uniform_coords,
)
from hardtsp.io import atomic_write, metrics_line
from hardtsp.policy import (
    PolicyConfig,
    PolicyModel,
    RolloutBaseline,
    baseline_update,
    greedy_tours,
    make_generator,
    reinforce_gradient,
)
from hardtsp.tsp import EXACT_LIMIT, GapStats, exact_cost, solve_heuristic, tour_cost

log = logging.getLogger(__name__)

TRANSFORMS = ("identity", "standardize")


class TrainingError(HardTspError):
    pass


@dataclass
class CurriculumState:
    temperature: float = 5.0
    epoch: int = 0
    t_start: float = 5.0
    t_end: float = 0.5
    decay: float = 0.8
    transform: str = "identity"

    def __post_init__(self):
        if not self.temperature > 0 or not self.decay > 0:
            raise ConfigError("temperature and decay must be positive")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}; choose from {TRANSFORMS}")

    @classmethod
    def start(cls, t_start=5.0, t_end=0.5, decay=0.8, transform="identity") -> "CurriculumState":
        return cls(temperature=t_start, epoch=0, t_start=t_start, t_end=t_end, decay=decay,
                   transform=transform)


def transform_hardness(values, transform: str = "identity") -> np.ndarray:
    h = np.asarray(values, dtype=np.float64)
    if transform == "identity":
        return h
    if transform == "standardize":
        std = h.std()
        return (h - h.mean()) / std if std > 0 else np.zeros_like(h)
    raise ConfigError(f"unknown transform {transform!r}")


def sample_weights(hardness_values, state: CurriculumState) -> np.ndarray:
    """Softmax of transformed hardness at temperature ``state.temperature``."""
    h = np.asarray(hardness_values, dtype=np.float64)
    if h.size == 0:
        raise ConfigError("need at least one hardness value")
    if not np.all(np.isfinite(h)):
        raise ConfigError("hardness values must be finite")
    if not state.temperature > 0:
        raise ConfigError("temperature must be positive")
    logits = transform_hardness(h, state.transform) / state.temperature
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


def temperature_step(state: CurriculumState) -> CurriculumState:
    """Multiply the temperature by ``decay``, never stepping past ``t_end``."""
    t = state.temperature * state.decay
    if state.decay < 1:
        t = max(state.t_end, t)
    elif state.decay > 1:
        t = min(state.t_end, t) if state.t_end >= state.t_start else t
    return replace(state, temperature=t, epoch=state.epoch + 1)


@dataclass
class StepMetrics:
    mean_cost: float
    mean_advantage: float
    grad_norm: float


def weighted_train_step(batch, weights, model: PolicyModel, baseline: RolloutBaseline, rng,
                        lr: float = 1e-4, weight_decay: float = 0.0, clip: float | None = 1.0,
                        baseline_costs=None, training: bool = True):
    """One Adam step on the weight-combined per-instance REINFORCE gradients.

    The weights replace the usual 1/B mean, so uniform weights reproduce the
    plain mean-loss step. With ``training=True`` batch normalization uses
    batch statistics, which couples instances: a zero-weight instance still
    shifts the others' normalization.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n_batch = len(batch)
    if weights.shape != (n_batch,):
        raise BatchShapeError(f"{weights.size} weights for a batch of {n_batch}")
    terms = reinforce_gradient(batch, model, baseline, rng, training=training,
                               baseline_costs=baseline_costs)
    grads = terms.weighted(weights)
    norm = ad.grad_norm(grads)
    if clip is not None:
        grads = ad.clip_gradients(grads, clip)
    ad.optimizer_step(model.store, grads, lr=lr, weight_decay=weight_decay)
    metrics = StepMetrics(mean_cost=float(terms.costs.mean()),
                          mean_advantage=float((terms.costs - terms.baseline_costs).mean()),
                          grad_norm=norm)
    return model, metrics


@dataclass(frozen=True)
class TrainConfig:
    n: int = 20
    epochs: int = 10
    batch_size: int = 128
    instances_per_epoch: int = 12800
    hard_fraction: float = 0.5
    warmup_epochs: int = 1
    curriculum: bool = True
    lr: float = 1e-4
    lr_decay: float = 1.0  # per epoch, warm-up included
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    policy: PolicyConfig = field(default_factory=PolicyConfig.desk)
    hag: HagConfig = field(default_factory=HagConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    hardness_rollouts: int = 8
    t_start: float = 5.0
    t_end: float = 0.5
    decay: float = 0.8
    transform: str = "identity"
    baseline_size: int = 1000
    alpha: float = 0.05
    eval_gen: str = "gmm"
    eval_cdist: float = 100.0
    eval_count: int = 100
    eval_oracle: str = "auto"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be at least 1")
        if not 0 <= self.hard_fraction <= 1:
            raise ConfigError("hard_fraction must lie in [0, 1]")
        if self.instances_per_epoch < self.batch_size:
            raise ConfigError("instances_per_epoch must be at least one batch")
        if self.warmup_epochs < 0 or self.eval_count < 0:
            raise ConfigError("warmup_epochs and eval_count must be non-negative")
        if self.eval_gen not in ("gmm", "uniform"):
            raise ConfigError(f"unknown eval generator {self.eval_gen!r}")
        if self.eval_oracle not in ("auto", "exact", "twoopt"):
            raise ConfigError(f"unknown oracle {self.eval_oracle!r}")
        if self.hag.n != self.n:
            object.__setattr__(self, "hag", replace(self.hag, n=self.n))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["policy"] = PolicyConfig(**d["policy"])
        hag = dict(d["hag"])
        hag["surrogate"] = SurrogateConfig(**hag["surrogate"])
        d["hag"] = HagConfig(**hag)
        d["surrogate"] = SurrogateConfig(**d["surrogate"])
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        base = dict(n=50, batch_size=512, instances_per_epoch=100_000,
                    policy=PolicyConfig.paper(), baseline_size=10_000, eval_count=10_000,
                    eval_oracle="twoopt")
        base.update(overrides)
        return cls(**base)


@dataclass
class EpochMetrics:
    epoch: int
    mean_gap: float | None
    std_gap: float | None
    mean_hardness: float | None
    std_hardness: float | None
    mean_cost: float
    std_cost: float
    temperature: float
    baseline_replaced: bool
    oracle: str
    seconds: float = 0.0

    def record(self) -> dict:
        """JSON-lines payload; wall-clock time is kept out so runs compare byte for byte."""
        d = asdict(self)
        d.pop("seconds")
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None if math.isnan(v) else ("inf" if v > 0 else "-inf")
        return d


@dataclass
class TrainResult:
    model: PolicyModel
    baseline: RolloutBaseline
    state: CurriculumState
    metrics: list


def _stream(seed: int, purpose: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, epoch])


_INIT, _BASELINE, _EVAL, _WARMUP, _EPOCH, _HARDNESS = range(6)


def oracle_kind(n: int, choice: str = "auto") -> str:
    if choice == "auto":
        return "exact" if n <= EXACT_LIMIT else "twoopt"
    return choice


def oracle_costs(coords: np.ndarray, kind: str) -> np.ndarray:
    if kind == "exact":
        return np.array([exact_cost(c) for c in coords])
    return np.array([tour_cost(c, solve_heuristic(c, seed=i)) for i, c in enumerate(coords)])


class HeldOut:
    """Fixed evaluation set with cached oracle costs."""

    def __init__(self, coords: np.ndarray, oracle: str):
        self.coords = coords
        self.oracle = oracle
        self.optimal = oracle_costs(coords, oracle)

    def gaps(self, model: PolicyModel) -> np.ndarray:
        _, costs = greedy_tours(self.coords, model)
        return (costs - self.optimal) / self.optimal


def eval_set(config: TrainConfig) -> HeldOut | None:
    if config.eval_count == 0:
        return None
    rng = _stream(config.seed, _EVAL)
    if config.eval_gen == "gmm":
        coords = gmm_coords(GmmConfig(n=config.n, c_dist=config.eval_cdist), config.eval_count, rng)
    else:
        coords = uniform_coords(config.n, config.eval_count, rng)
    return HeldOut(coords, oracle_kind(config.n, config.eval_oracle))


def _train_epoch(model, baseline, coords, weights_fn, config, rng, gen, lr):
    """Run one pass over ``coords``; returns per-instance costs and hardness."""
    order = rng.permutation(len(coords))
    costs, hards = [], []
    for b, lo in enumerate(range(0, len(coords) - config.batch_size + 1, config.batch_size)):
        batch = coords[order[lo:lo + config.batch_size]]
        try:
            bl_costs = baseline.cost(batch)
            weights, h = weights_fn(batch, bl_costs)
            _, step = weighted_train_step(batch, weights, model, baseline, gen, lr=lr,
                                          weight_decay=config.weight_decay,
                                          clip=config.grad_clip, baseline_costs=bl_costs)
        except HardTspError as exc:
            raise TrainingError(f"batch {b}: {exc}") from exc
        costs.append(step.mean_cost)
        if h is not None:
            hards.append(h)
    return np.asarray(costs), (np.concatenate(hards) if hards else None)


def _uniform_weights(batch, _bl):
    return np.full(len(batch), 1.0 / len(batch)), None


def run_training(config: TrainConfig, init_model: PolicyModel | None = None,
                 out_dir=None, resume: bool = False, held_out: HeldOut | None = None) -> TrainResult:
    """Warm up on uniform instances, then train for ``config.epochs`` epochs.

    Each epoch mixes uniform and hardness-adaptive instances (fraction
    ``hard_fraction`` hard), reweights each batch by hardness when
    ``curriculum`` is on, then steps the temperature and tests whether the
    rollout baseline should be replaced. Every random draw comes from streams
    keyed on (seed, purpose, epoch), so a run is reproducible and can resume
    at any epoch boundary from ``out_dir``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if held_out is None:
        held_out = eval_set(config)
    state = CurriculumState.start(config.t_start, config.t_end, config.decay, config.transform)
    metrics: list[EpochMetrics] = []

    if resume:
        if out is None or not (out / "state.json").exists():
            raise ConfigError("resume requested but no state file found")
        saved = json.loads((out / "state.json").read_text())
        if saved["config"] != json.loads(json.dumps(config.to_dict())):
            raise CheckpointCompatibilityError("training config differs from the checkpointed run")
        model, _ = PolicyModel.load(out / "model.htck", expect=config.policy)
        bl_model, _ = PolicyModel.load(out / "baseline.htck", expect=config.policy)
        baseline = RolloutBaseline(bl_model, uniform_coords(config.n, config.baseline_size,
                                                            _stream(config.seed, _BASELINE)),
                                   config.alpha)
        state = CurriculumState(**saved["state"])
        metrics = [EpochMetrics(**m, seconds=0.0) for m in saved["metrics"]]
        start_epoch = state.epoch
    else:
        model = init_model.copy() if init_model is not None else PolicyModel(
            config.policy, seed=int(_stream(config.seed, _INIT).integers(2 ** 62)))
        if model.config != config.policy:
            raise CheckpointCompatibilityError("initial model does not match the policy config")
        baseline = RolloutBaseline(model, uniform_coords(config.n, config.baseline_size,
                                                         _stream(config.seed, _BASELINE)),
                                   config.alpha)
        for w in range(config.warmup_epochs):
            rng = _stream(config.seed, _WARMUP, w)
            coords = uniform_coords(config.n, config.instances_per_epoch, rng)
            try:
                _train_epoch(model, baseline, coords, _uniform_weights, config, rng,
                             make_generator(rng), config.lr * config.lr_decay ** w)
            except TrainingError as exc:
                raise TrainingError(f"warm-up epoch {w}: {exc}") from exc
            baseline, _, _ = baseline_update(model, baseline)
        start_epoch = 0
        if out is not None:
            atomic_write(out / "metrics.jsonl", "")
            atomic_write(out / "timing.jsonl", "")

    # hardness scoring draws from its own stream so it never perturbs training samples
    def curriculum_weights(batch, bl_costs):
        sur = surrogate_update(model, batch, config.surrogate, h_gen, baseline_costs=bl_costs)
        reports = hardness(batch, model, sur, config.hardness_rollouts, h_rng)
        h = np.array([r.hardness for r in reports])
        return sample_weights(h, state), h

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        rng = _stream(config.seed, _EPOCH, epoch)
        gen = make_generator(rng)
        h_rng = _stream(config.seed, _HARDNESS, epoch)
        h_gen = make_generator(h_rng)
        n_hard = int(round(config.hard_fraction * config.instances_per_epoch))
        n_easy = config.instances_per_epoch - n_hard
        parts = []
        try:
            if n_easy:
                parts.append(uniform_coords(config.n, n_easy, rng))
            if n_hard:
                parts.append(hag_coords(model, config.hag, n_hard, rng))
            coords = np.concatenate(parts)
            weights_fn = curriculum_weights if config.curriculum else _uniform_weights
            lr = config.lr * config.lr_decay ** (config.warmup_epochs + epoch)
            costs, hard = _train_epoch(model, baseline, coords, weights_fn, config, rng, gen, lr)
            state = temperature_step(state)
            baseline, replaced, p = baseline_update(model, baseline)
        except HardTspError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}") from exc
        if held_out is not None:
            stats = GapStats.from_gaps(held_out.gaps(model))
            mean_gap, std_gap, oracle = stats.mean, stats.std, held_out.oracle
        else:
            mean_gap = std_gap = None
            oracle = "none"
        m = EpochMetrics(
            epoch=epoch, mean_gap=mean_gap, std_gap=std_gap,
            mean_hardness=None if hard is None else float(hard.mean()),
            std_hardness=None if hard is None else float(hard.std()),
            mean_cost=float(costs.mean()), std_cost=float(costs.std()),
            temperature=state.temperature, baseline_replaced=bool(replaced), oracle=oracle,
            seconds=time.perf_counter() - t0)
        metrics.append(m)
        log.info("epoch %d gap=%s T=%.4g baseline %s (p=%.3g) %.1fs", epoch, mean_gap,
                 state.temperature, "replaced" if replaced else "kept", p, m.seconds)
        if out is not None:
            _checkpoint(out, config, model, baseline, state, metrics)
    return TrainResult(model=model, baseline=baseline, state=state, metrics=metrics)


def _checkpoint(out: Path, config, model, baseline, state, metrics) -> None:
    meta = {"epoch": state.epoch, "seed": config.seed}
    model.save(out / "model.htck", meta)
    baseline.model.save(out / "baseline.htck", meta)
    atomic_write(out / "metrics.jsonl", "".join(metrics_line(m.record()) for m in metrics))
    atomic_write(out / "timing.jsonl",
                 "".join(json.dumps({"epoch": m.epoch, "seconds": m.seconds}) + "\n"
                         for m in metrics))
    saved = {"config": config.to_dict(), "state": asdict(state),
             "metrics": [{k: v for k, v in asdict(m).items() if k != "seconds"} for m in metrics]}
    atomic_write(out / "state.json", json.dumps(saved, indent=1, sort_keys=True))
