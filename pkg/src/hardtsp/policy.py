"""Attention encoder-decoder TSP policy trained with REINFORCE.

The encoder is a stack of multi-head self-attention + feed-forward blocks
with skip connections and batch normalization. The decoder builds a tour one
node at a time from a context of (graph embedding, first node, last node),
runs one masked multi-head glimpse, and scores candidates with a single-head
compatibility squashed by ``clip * tanh``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import stats

from hardtsp import autodiff as ad
from hardtsp.autodiff import DTYPE, ParameterStore, forward_op, linear
from hardtsp.errors import (
    BaselineError,
    BatchShapeError,
    CheckpointCompatibilityError,
    ConfigError,
    InvalidInstanceError,
)
from hardtsp.tsp import Tour, TspInstance, batch_tour_cost


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 128
    heads: int = 8
    layers: int = 3
    ff_hidden: int = 512
    clip: float = 10.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ConfigError("need at least one encoder layer")

    @classmethod
    def desk(cls) -> "PolicyConfig":
        return cls(embed_dim=32, heads=4, layers=2, ff_hidden=128)

    @classmethod
    def paper(cls) -> "PolicyConfig":
        return cls()


class PolicyModel:
    """Architecture hyper-parameters plus the ``ParameterStore`` holding their values."""

    def __init__(self, config: PolicyConfig, store: ParameterStore | None = None, seed: int = 0):
        self.config = config
        self.store = store if store is not None else self._init_store(config, seed)

    @staticmethod
    def _init_store(cfg: PolicyConfig, seed: int) -> ParameterStore:
        gen = torch.Generator().manual_seed(seed)
        store = ParameterStore()
        d, f = cfg.embed_dim, cfg.ff_hidden

        def uniform(name, shape, fan):
            bound = 1.0 / math.sqrt(fan)
            store.add_param(name, (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)

        def bn(prefix):
            store.add_param(f"{prefix}.weight", torch.ones(d, dtype=DTYPE))
            store.add_param(f"{prefix}.bias", torch.zeros(d, dtype=DTYPE))
            store.add_buffer(f"{prefix}.running_mean", torch.zeros(d, dtype=DTYPE))
            store.add_buffer(f"{prefix}.running_var", torch.ones(d, dtype=DTYPE))

        uniform("init.W", (2, d), 2)
        uniform("init.b", (d,), 2)
        for layer in range(cfg.layers):
            p = f"enc{layer}"
            for w in ("Wq", "Wk", "Wv", "Wo"):
                uniform(f"{p}.{w}", (d, d), d)
            bn(f"{p}.bn1")
            uniform(f"{p}.ff1.W", (d, f), d)
            uniform(f"{p}.ff1.b", (f,), d)
            uniform(f"{p}.ff2.W", (f, d), f)
            uniform(f"{p}.ff2.b", (d,), f)
            bn(f"{p}.bn2")
        uniform("dec.placeholder", (2 * d,), d)
        uniform("dec.Wctx", (3 * d, d), 3 * d)
        uniform("dec.Wnode", (d, 3 * d), d)
        uniform("dec.Wout", (d, d), d)
        return store

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.config, self.store.copy())

    def hparams(self) -> dict:
        return asdict(self.config)

    def save(self, path, meta: dict | None = None) -> None:
        ad.save_checkpoint(path, self.store, self.hparams(), meta)

    @classmethod
    def load(cls, path, expect: PolicyConfig | None = None):
        """Load a checkpoint; returns ``(model, meta)``."""
        store, hparams, meta = ad.load_checkpoint(path)
        config = PolicyConfig(**hparams)
        if expect is not None and config != expect:
            raise CheckpointCompatibilityError(
                f"checkpoint hyper-parameters {hparams} do not match {asdict(expect)}")
        return cls(config, store), meta


@dataclass
class Embeddings:
    coords: torch.Tensor  # (B, n, 2)
    nodes: torch.Tensor  # (B, n, d)
    graph: torch.Tensor  # (B, d)


@dataclass
class DecodeResult:
    tour: Tour
    log_prob: float
    cost: float


@dataclass
class BatchDecode:
    tours: torch.Tensor  # (B, n) long
    log_prob: torch.Tensor  # (B,), carries the graph when built with grad enabled
    costs: np.ndarray  # (B,)
    step_log_probs: torch.Tensor  # (B, n)

    def results(self) -> list[DecodeResult]:
        return [DecodeResult(Tour(t.tolist()), float(lp), float(c))
                for t, lp, c in zip(self.tours, self.log_prob.detach(), self.costs)]


def make_generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2 ** 62))
    return torch.Generator().manual_seed(int(seed))


def as_coords(instances, check_projected: bool = True) -> np.ndarray:
    """Stack instances into a float64 array of shape (B, n, 2)."""
    if isinstance(instances, TspInstance):
        instances = [instances]
    if isinstance(instances, np.ndarray):
        arr = np.asarray(instances, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
    else:
        sizes = {inst.n for inst in instances}
        if len(sizes) > 1:
            raise BatchShapeError(f"batch mixes instance sizes {sorted(sizes)}")
        if not instances:
            raise BatchShapeError("empty batch")
        arr = np.stack([inst.coords for inst in instances])
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise BatchShapeError(f"expected coordinates of shape (B, n, 2), got {arr.shape}")
    if check_projected and (arr.min() < 0 or arr.max() > 1):
        raise InvalidInstanceError("policy inputs must be projected to [0, 1]")
    return arr


def _heads(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(1, 2)


def encode(instances, model: PolicyModel, training: bool = False) -> Embeddings:
    """Node embeddings and their mean (the graph embedding).

    ``instances`` may be a list of ``TspInstance``, an array, or a float64
    tensor (which may require grad, for coordinate gradients).
    """
    if torch.is_tensor(instances):
        coords = instances
        if coords.dim() != 3 or coords.shape[-1] != 2:
            raise BatchShapeError(f"expected (B, n, 2), got {tuple(coords.shape)}")
    else:
        coords = torch.from_numpy(as_coords(instances))
    cfg, s = model.config, model.store
    hd = cfg.heads
    dk = cfg.embed_dim // hd
    h = linear(coords, s["init.W"], s["init.b"])
    for layer in range(cfg.layers):
        p = f"enc{layer}"
        q = _heads(linear(h, s[f"{p}.Wq"]), hd)
        k = _heads(linear(h, s[f"{p}.Wk"]), hd)
        v = _heads(linear(h, s[f"{p}.Wv"]), hd)
        att = forward_op("softmax", forward_op("scale", forward_op("matmul", q, k.transpose(-1, -2)),
                                               1.0 / math.sqrt(dk)))
        mixed = forward_op("matmul", att, v).transpose(1, 2).reshape(h.shape)
        h = forward_op("add", h, linear(mixed, s[f"{p}.Wo"]))
        h = _bn(h, s, f"{p}.bn1", training)
        ff = linear(forward_op("relu", linear(h, s[f"{p}.ff1.W"], s[f"{p}.ff1.b"])),
                    s[f"{p}.ff2.W"], s[f"{p}.ff2.b"])
        h = forward_op("add", h, ff)
        h = _bn(h, s, f"{p}.bn2", training)
    return Embeddings(coords=coords, nodes=h, graph=forward_op("mean", h, dim=1))


def _bn(h, s, prefix, training):
    return forward_op("batch_norm", h, s[f"{prefix}.weight"], s[f"{prefix}.bias"],
                      s[f"{prefix}.running_mean"], s[f"{prefix}.running_var"], training)


def decode(emb: Embeddings, model: PolicyModel, mode: str = "greedy", rng=None,
           forced=None) -> BatchDecode:
    """Sequentially build one tour per instance.

    ``mode`` is ``"sample"`` (needs ``rng``) or ``"greedy"``. Passing
    ``forced`` (a (B, n) index tensor) replays given tours and only
    computes their log-probabilities.
    """
    if forced is None and mode not in ("sample", "greedy"):
        raise ConfigError(f"unknown decode mode {mode!r}")
    if forced is None and mode == "sample" and rng is None:
        raise ConfigError("sample mode needs an rng")
    gen = make_generator(rng) if (forced is None and mode == "sample") else None
    cfg, s = model.config, model.store
    nodes, graph = emb.nodes, emb.graph
    b, n, d = nodes.shape
    hd = cfg.heads
    dk = d // hd
    glimpse_k, glimpse_v, logit_k = linear(nodes, s["dec.Wnode"]).split(d, dim=-1)
    glimpse_k = _heads(glimpse_k, hd)  # (B, H, n, dk)
    glimpse_v = _heads(glimpse_v, hd)
    logit_kt = logit_k.transpose(1, 2)  # (B, d, n)
    placeholder = s["dec.placeholder"].expand(b, 2 * d)

    # one uniform per (instance, step), drawn up front in row-major order, so an
    # instance's sampled tour does not depend on what follows it in the batch
    uniforms = torch.rand((b, n), generator=gen, dtype=DTYPE) if gen is not None else None
    visited = torch.zeros(b, n, dtype=torch.bool)
    steps = []
    chosen = []
    first = last = None
    forced_t = None if forced is None else torch.as_tensor(forced, dtype=torch.long)
    for t in range(n):
        if t == 0:
            ctx = forward_op("concat", graph, placeholder)
        else:
            ctx = forward_op("concat", graph, forward_op("gather_rows", nodes, first),
                             forward_op("gather_rows", nodes, last))
        query = linear(ctx, s["dec.Wctx"]).reshape(b, hd, 1, dk)
        compat = forward_op("scale", forward_op("matmul", query, glimpse_k.transpose(-1, -2)),
                            1.0 / math.sqrt(dk))
        compat = forward_op("masked_fill", compat, visited[:, None, None, :].expand(b, hd, 1, n))
        glimpse = forward_op("matmul", forward_op("softmax", compat), glimpse_v).reshape(b, 1, d)
        glimpse = linear(glimpse, s["dec.Wout"])
        logits = forward_op("scale", forward_op("matmul", glimpse, logit_kt).reshape(b, n),
                            1.0 / math.sqrt(d))
        logits = forward_op("scale", forward_op("tanh", logits), cfg.clip)
        logp = forward_op("log_softmax", forward_op("masked_fill", logits, visited))
        if forced_t is not None:
            action = forced_t[:, t]
        elif mode == "greedy":
            action = logp.detach().argmax(dim=-1)
        else:
            action = _inverse_cdf(logp.detach().exp(), uniforms[:, t])
        assert not visited[torch.arange(b), action].any(), "decoder selected a visited node"
        steps.append(logp.gather(1, action[:, None]).squeeze(1))
        chosen.append(action)
        visited = visited.clone()
        visited[torch.arange(b), action] = True
        if t == 0:
            first = action
        last = action
    tours = torch.stack(chosen, dim=1)
    step_lp = torch.stack(steps, dim=1)
    costs = batch_tour_cost(emb.coords.detach().numpy(), tours.numpy())
    return BatchDecode(tours=tours, log_prob=step_lp.sum(dim=1), costs=costs,
                       step_log_probs=step_lp)


def _inverse_cdf(probs, u):
    """Index i with cdf[i-1] <= u * total < cdf[i]; zero-probability entries are never hit."""
    cdf = probs.cumsum(dim=-1)
    idx = (cdf <= (u * cdf[:, -1])[:, None]).sum(dim=-1)
    last = probs.shape[1] - 1 - (probs > 0).flip(-1).long().argmax(dim=-1)
    return torch.minimum(idx, last)


def rollout(instances, model: PolicyModel, mode: str = "greedy", rng=None,
            chunk: int = 1024) -> np.ndarray:
    """Decode costs without building a graph; returns an array of length B."""
    coords = as_coords(instances)
    out = []
    gen = make_generator(rng) if mode == "sample" else None
    with torch.no_grad():
        for i in range(0, len(coords), chunk):
            emb = encode(coords[i:i + chunk], model)
            out.append(decode(emb, model, mode, gen).costs)
    return np.concatenate(out)


def greedy_tours(instances, model: PolicyModel, chunk: int = 1024):
    coords = as_coords(instances)
    tours, costs = [], []
    with torch.no_grad():
        for i in range(0, len(coords), chunk):
            res = decode(encode(coords[i:i + chunk], model), model, "greedy")
            tours.append(res.tours.numpy())
            costs.append(res.costs)
    return np.concatenate(tours), np.concatenate(costs)


def solver_cost(instances, model: PolicyModel, samples: int = 8, rng=None,
                return_samples: bool = False):
    """Monte-Carlo estimate of the expected sampled tour length per instance."""
    if samples < 1:
        raise ConfigError("need at least one sample")
    coords = as_coords(instances)
    b = len(coords)
    rep = np.repeat(coords, samples, axis=0)
    costs = rollout(rep, model, "sample", make_generator(rng if rng is not None else 0))
    costs = costs.reshape(b, samples)
    mean = costs.mean(axis=1)
    return (mean, costs) if return_samples else mean


@dataclass
class ReinforceTerms:
    """Per-instance REINFORCE surrogate losses ``(C - C_b) * log p``.

    Their gradients w.r.t. the policy parameters are the per-instance
    policy-gradient estimates; ``weighted`` contracts them with instance
    weights using a single backward pass.
    """

    losses: torch.Tensor  # (B,)
    costs: np.ndarray
    baseline_costs: np.ndarray
    log_prob: torch.Tensor
    model: PolicyModel

    def weighted(self, weights, retain_graph: bool = False) -> dict:
        w = torch.as_tensor(np.asarray(weights, dtype=np.float64))
        if w.shape != self.losses.shape:
            raise BatchShapeError(f"{w.numel()} weights for {self.losses.numel()} instances")
        total = (w * self.losses).sum()
        names = self.model.store.names()
        params = [self.model.store.params[k] for k in names]
        grads = torch.autograd.grad(total, params, retain_graph=retain_graph, allow_unused=True)
        return {k: torch.zeros_like(p) if g is None else g for k, p, g in zip(names, params, grads)}

    def mean(self, retain_graph: bool = False) -> dict:
        """Gradient of the plain batch-mean loss."""
        total = self.losses.mean()
        names = self.model.store.names()
        params = [self.model.store.params[k] for k in names]
        grads = torch.autograd.grad(total, params, retain_graph=retain_graph, allow_unused=True)
        return {k: torch.zeros_like(p) if g is None else g for k, p, g in zip(names, params, grads)}

    def per_instance(self) -> list[dict]:
        out = []
        b = self.losses.numel()
        for i in range(b):
            onehot = np.zeros(b)
            onehot[i] = 1.0
            out.append(self.weighted(onehot, retain_graph=True))
        return out


class RolloutBaseline:
    """Frozen copy of the best policy so far, scored by greedy decoding."""

    def __init__(self, model: PolicyModel, eval_instances, alpha: float = 0.05):
        if not 0 < alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
        self.eval_coords = as_coords(eval_instances) if len(eval_instances) else None
        if self.eval_coords is None:
            raise ConfigError("baseline evaluation set is empty")
        self.model = model.copy()
        self.alpha = alpha
        self.eval_costs = rollout(self.eval_coords, self.model, "greedy")

    def cost(self, instances) -> np.ndarray:
        try:
            return rollout(instances, self.model, "greedy")
        except Exception as exc:
            raise BaselineError(f"baseline evaluation failed: {exc}") from exc


def reinforce_gradient(batch, model: PolicyModel, baseline: RolloutBaseline | None, rng,
                       training: bool = True, baseline_costs=None) -> ReinforceTerms:
    """One sampled tour per instance against the baseline's greedy cost.

    Pass ``baseline_costs`` directly to override the baseline model.
    """
    coords = as_coords(batch)
    if baseline_costs is None:
        if baseline is None:
            raise BaselineError("need a baseline or explicit baseline costs")
        baseline_costs = baseline.cost(coords)
    baseline_costs = np.asarray(baseline_costs, dtype=np.float64)
    emb = encode(coords, model, training=training)
    res = decode(emb, model, "sample", rng)
    adv = torch.from_numpy(res.costs - baseline_costs)
    return ReinforceTerms(losses=adv * res.log_prob, costs=res.costs,
                          baseline_costs=baseline_costs, log_prob=res.log_prob, model=model)


def paired_improvement_pvalue(candidate_costs, baseline_costs) -> float:
    """One-sided paired t-test p-value for "candidate is not better"."""
    cand = np.asarray(candidate_costs, dtype=np.float64)
    base = np.asarray(baseline_costs, dtype=np.float64)
    diff = cand - base
    if diff.size < 2:
        raise ConfigError("paired t-test needs at least two instances")
    # constant differences (up to rounding) make the t statistic undefined
    if np.ptp(diff) <= 1e-12 * max(1.0, float(np.abs(diff).max())):
        return 0.0 if diff.mean() < 0 else 1.0
    return float(stats.ttest_rel(cand, base, alternative="less").pvalue)


def baseline_update(candidate: PolicyModel, baseline: RolloutBaseline):
    """Replace the baseline with ``candidate`` if it is significantly better.

    Returns ``(baseline, replaced, p_value)``; a replaced baseline is a new
    object holding a frozen copy of the candidate.
    """
    if baseline.eval_coords is None or len(baseline.eval_coords) == 0:
        raise ConfigError("baseline evaluation set is empty")
    cand_costs = rollout(baseline.eval_coords, candidate, "greedy")
    p = paired_improvement_pvalue(cand_costs, baseline.eval_costs)
    if p < baseline.alpha:
        return RolloutBaseline(candidate, baseline.eval_coords, baseline.alpha), True, p
    return baseline, False, p
