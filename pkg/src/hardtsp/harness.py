"""Experiment plumbing behind the command line: configs, evaluation, reports."""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from hardtsp.curriculum import TrainConfig, oracle_costs
from hardtsp.errors import ConfigError, FormatError, SizeLimitError
from hardtsp.generators import HagConfig, SurrogateConfig, hardness, surrogate_update
from hardtsp.io import read_metrics
from hardtsp.policy import PolicyConfig, PolicyModel, as_coords, greedy_tours
from hardtsp.tsp import EXACT_LIMIT, GapStats, optimality_gap

log = logging.getLogger(__name__)


def configure_threads() -> None:
    """Cap worker threads from ``HARDTSP_THREADS`` (default: leave libraries alone)."""
    value = os.environ.get("HARDTSP_THREADS")
    if not value:
        return
    try:
        count = max(1, int(value))
    except ValueError:
        raise ConfigError(f"HARDTSP_THREADS must be an integer, got {value!r}") from None
    import numba
    import torch
    torch.set_num_threads(count)
    numba.set_num_threads(min(count, numba.config.NUMBA_NUM_THREADS))


# --- flat key = value config files -------------------------------------

def parse_config_text(text: str) -> dict:
    out = {}
    for k, raw in enumerate(text.splitlines()):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {k + 1}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, current):
    if isinstance(current, bool):
        low = value.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def apply_overrides(config: TrainConfig, values: dict) -> TrainConfig:
    """Apply flat ``key = value`` settings; nested fields use dots (``hag.eta``)."""
    top, policy, hag, hag_sur, sur = {}, {}, {}, {}, {}
    for key, value in values.items():
        parts = key.split(".")
        try:
            if len(parts) == 1:
                current = getattr(config, key)
                if not isinstance(current, (bool, int, float, str)):
                    raise AttributeError
                top[key] = _coerce(str(value), current)
            elif parts[0] == "policy" and len(parts) == 2:
                policy[parts[1]] = _coerce(str(value), getattr(config.policy, parts[1]))
            elif parts[0] == "hag" and len(parts) == 2:
                hag[parts[1]] = _coerce(str(value), getattr(config.hag, parts[1]))
            elif parts[:2] == ["hag", "surrogate"] and len(parts) == 3:
                hag_sur[parts[2]] = _coerce(str(value), getattr(config.hag.surrogate, parts[2]))
            elif parts[0] == "surrogate" and len(parts) == 2:
                sur[parts[1]] = _coerce(str(value), getattr(config.surrogate, parts[1]))
            else:
                raise AttributeError
        except AttributeError:
            raise ConfigError(f"unknown config key {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    new_hag = replace(config.hag, surrogate=replace(config.hag.surrogate, **hag_sur), **hag)
    return replace(config, policy=replace(config.policy, **policy), hag=new_hag,
                   surrogate=replace(config.surrogate, **sur), **top)


def desk_profile(**overrides) -> TrainConfig:
    """Single-machine settings: TSP-20, small network, larger step size."""
    base = dict(n=20, epochs=8, batch_size=128, instances_per_epoch=6400, warmup_epochs=20,
                lr=1e-3, policy=PolicyConfig.desk(), eval_count=100,
                surrogate=SurrogateConfig(inner_lr=1e-3))
    base["hag"] = HagConfig(n=20, surrogate=SurrogateConfig(inner_lr=1e-3))
    base.update(overrides)
    return TrainConfig(**base)


def paper_profile(**overrides) -> TrainConfig:
    return TrainConfig.paper(**overrides)


PROFILES = {"desk": desk_profile, "paper": paper_profile}


# --- evaluation ---------------------------------------------------------

@dataclass
class EvalReport:
    records: list
    stats: GapStats
    oracle: str

    @classmethod
    def from_records(cls, records, oracle: str) -> "EvalReport":
        return cls(records=records, stats=GapStats.from_gaps([r["gap"] for r in records]),
                   oracle=oracle)

    def to_json(self) -> str:
        return json.dumps({"oracle": self.oracle, "aggregate": asdict(self.stats),
                           "records": self.records}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(records=d["records"], stats=GapStats(**d["aggregate"]), oracle=d["oracle"])

    def summary(self) -> str:
        return (f"mean gap {100 * self.stats.mean:.3f}% +- {100 * self.stats.std:.3f}% "
                f"over {self.stats.count} instances ({self.oracle} oracle)")


def evaluate(model: PolicyModel, instances, oracle: str = "exact",
             tours_override=None) -> EvalReport:
    """Greedy-decode every instance and compare with the oracle tour length.

    ``tours_override`` replaces the model's costs with given ones (used to
    evaluate an oracle against itself).
    """
    coords = as_coords(instances)
    if oracle not in ("exact", "twoopt"):
        raise ConfigError(f"unknown oracle {oracle!r}")
    if oracle == "exact" and coords.shape[1] > EXACT_LIMIT:
        raise SizeLimitError(f"exact oracle supports n <= {EXACT_LIMIT}; "
                             f"got n={coords.shape[1]}, use --oracle twoopt")
    optimal = oracle_costs(coords, oracle)
    if tours_override is None:
        _, costs = greedy_tours(coords, model)
    else:
        costs = np.asarray(tours_override, dtype=np.float64)
    records = [{"id": i, "model_cost": float(c), "oracle_cost": float(o),
                "gap": optimality_gap(float(c), float(o))}
               for i, (c, o) in enumerate(zip(costs, optimal))]
    return EvalReport.from_records(records, oracle)


HARDNESS_COLUMNS = ["id", "hardness", "solver_cost", "surrogate_cost", "exact_gap"]


def hardness_rows(model: PolicyModel, instances, config: SurrogateConfig, rollouts: int,
                  seed: int) -> list[dict]:
    """Hardness per instance; adds the exact gap of the same solver-cost estimate when n allows."""
    coords = as_coords(instances)
    rng = np.random.default_rng(seed)
    sur = surrogate_update(model, coords, config, rng)
    reports = hardness(coords, model, sur, rollouts, rng)
    rows = []
    exact = coords.shape[1] <= EXACT_LIMIT
    optimal = oracle_costs(coords, "exact") if exact else None
    for i, rep in enumerate(reports):
        row = {"id": i, "hardness": rep.hardness, "solver_cost": rep.solver_cost,
               "surrogate_cost": rep.surrogate_cost, "exact_gap": ""}
        if exact:
            row["exact_gap"] = optimality_gap(rep.solver_cost, float(optimal[i]))
        rows.append(row)
    return rows


def _fmt(value):
    return f"{value:.17g}" if isinstance(value, float) else str(value)


def rows_to_csv(rows, columns) -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in columns])
    return buf.getvalue()


def plot_table(labelled_paths) -> str:
    """Align per-epoch mean/std gap columns of several metrics files into one CSV."""
    series = []
    for label, path in labelled_paths:
        records = read_metrics(path)
        if not records:
            raise FormatError(f"metrics file {path} is empty")
        series.append((label, {r["epoch"]: r for r in records}))
    epochs = sorted(set().union(*(s.keys() for _, s in series)))
    if len({len(s) for _, s in series}) > 1:
        warnings.warn("metrics files have different epoch counts; padding with blanks",
                      stacklevel=2)
    columns = ["epoch"]
    for label, _ in series:
        columns += [f"{label}_mean_gap", f"{label}_std_gap"]
    rows = []
    for e in epochs:
        row = {"epoch": e}
        for label, recs in series:
            rec = recs.get(e, {})
            for key in ("mean_gap", "std_gap"):
                value = rec.get(key)
                row[f"{label}_{key}"] = "" if value is None else float(value)
        rows.append(row)
    return rows_to_csv(rows, columns)


def train_config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
