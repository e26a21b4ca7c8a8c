"""Euclidean TSP primitives: instances, tours, costs, oracles and projection.

Everything here is a pure function of its inputs and works in float64.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from hardtsp import _heldkarp
from hardtsp.errors import (
    DegenerateInstanceError,
    DomainError,
    InvalidInstanceError,
    InvalidTourError,
    OracleViolationError,
    SingularGradientWarning,
    SizeLimitError,
)

EXACT_LIMIT = 20
COST_ATOL = 1e-9


@dataclass(frozen=True, eq=False)
class TspInstance:
    """``n`` planar points. ``projected`` promises every coordinate is in [0, 1]."""

    coords: np.ndarray
    projected: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidInstanceError(f"coords must have shape (n, 2), got {coords.shape}")
        if coords.shape[0] < 3:
            raise InvalidInstanceError(f"need at least 3 nodes, got {coords.shape[0]}")
        if not np.all(np.isfinite(coords)):
            raise InvalidInstanceError("coordinates must be finite")
        if self.projected and (coords.min() < 0.0 or coords.max() > 1.0):
            raise InvalidInstanceError("projected instance has coordinates outside [0, 1]")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TspInstance):
            return NotImplemented
        return self.projected == other.projected and np.array_equal(self.coords, other.coords)

    def __hash__(self):
        return hash(self.coords.tobytes())


@dataclass(frozen=True)
class Tour:
    order: tuple

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        if sorted(order) != list(range(len(order))):
            raise InvalidTourError(f"tour is not a permutation of 0..{len(order) - 1}: {order}")
        object.__setattr__(self, "order", order)

    def __len__(self):
        return len(self.order)

    def __iter__(self):
        return iter(self.order)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.order, dtype=np.int64)


@dataclass(frozen=True)
class GapStats:
    mean: float
    std: float
    count: int

    @classmethod
    def from_gaps(cls, gaps) -> "GapStats":
        gaps = np.asarray(gaps, dtype=np.float64)
        if gaps.size == 0:
            raise DomainError("cannot summarize an empty gap list")
        return cls(mean=float(gaps.mean()), std=float(gaps.std()), count=int(gaps.size))


def _coords(instance) -> np.ndarray:
    if isinstance(instance, TspInstance):
        return instance.coords
    return np.asarray(instance, dtype=np.float64)


def _order(tour, n: int) -> np.ndarray:
    order = tour.as_array() if isinstance(tour, Tour) else np.asarray(tour, dtype=np.int64)
    if order.shape != (n,):
        raise InvalidTourError(f"tour has {order.size} entries for an instance with {n} nodes")
    if not np.array_equal(np.sort(order), np.arange(n)):
        raise InvalidTourError("tour is not a permutation of the instance's nodes")
    return order


def tour_cost(instance, tour) -> float:
    """Closed-cycle Euclidean length of ``tour``."""
    coords = _coords(instance)
    order = _order(tour, coords.shape[0])
    path = coords[order]
    return float(np.linalg.norm(path - np.roll(path, -1, axis=0), axis=1).sum())


def batch_tour_cost(coords: np.ndarray, tours: np.ndarray) -> np.ndarray:
    """Vectorized ``tour_cost`` for arrays of shape (B, n, 2) and (B, n). Unchecked."""
    path = np.take_along_axis(coords, tours[..., None], axis=1)
    return np.linalg.norm(path - np.roll(path, -1, axis=1), axis=2).sum(axis=1)


def batch_tour_cost_gradient(coords: np.ndarray, tours: np.ndarray) -> np.ndarray:
    """Gradient of ``batch_tour_cost`` w.r.t. coords, shape (B, n, 2).

    Zero-length edges contribute nothing; callers decide whether to warn.
    """
    path = np.take_along_axis(coords, tours[..., None], axis=1)
    edge = path - np.roll(path, -1, axis=1)  # from successor to current node
    length = np.linalg.norm(edge, axis=2, keepdims=True)
    unit = np.divide(edge, length, out=np.zeros_like(edge), where=length > 0)
    # node at position k gains +unit_k (edge to successor) and -unit_{k-1} (edge from predecessor)
    per_position = unit - np.roll(unit, 1, axis=1)
    grad = np.zeros_like(coords)
    np.put_along_axis(grad, tours[..., None], per_position, axis=1)
    return grad


def tour_cost_gradient(instance, tour) -> np.ndarray:
    """d tour_cost / d coords as an (n, 2) array.

    Each node receives the sum of the unit vectors pointing to it from its two
    tour neighbours. Coincident neighbours contribute a zero vector and emit a
    ``SingularGradientWarning``.
    """
    coords = _coords(instance)
    order = _order(tour, coords.shape[0])
    path = coords[order]
    if np.any(np.all(path == np.roll(path, -1, axis=0), axis=1)):
        warnings.warn("coincident adjacent tour nodes; using a zero edge direction",
                      SingularGradientWarning, stacklevel=2)
    return batch_tour_cost_gradient(coords[None], order[None])[0]


def optimality_gap(model_cost: float, optimal_cost: float, tol: float = COST_ATOL) -> float:
    if not optimal_cost > 0:
        raise DomainError(f"optimal cost must be positive, got {optimal_cost}")
    if model_cost < optimal_cost - tol:
        raise OracleViolationError(
            f"model cost {model_cost!r} is below the optimal cost {optimal_cost!r}")
    return (model_cost - optimal_cost) / optimal_cost


def distance_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def solve_exact(instance, limit: int = EXACT_LIMIT) -> Tour:
    """Optimal tour by Held-Karp dynamic programming over node subsets."""
    coords = _coords(instance)
    n = coords.shape[0]
    if n > limit:
        raise SizeLimitError(
            f"exact solver is limited to n <= {limit} (got n={n}); use solve_heuristic instead")
    if n < 3:
        raise InvalidInstanceError("need at least 3 nodes")
    order = _heldkarp.held_karp_tour(distance_matrix(coords))
    return Tour(order)


def exact_cost(instance, limit: int = EXACT_LIMIT) -> float:
    return tour_cost(instance, solve_exact(instance, limit))


def nearest_neighbor_tour(dist: np.ndarray, start: int) -> np.ndarray:
    n = dist.shape[0]
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    for _ in range(n - 1):
        row = np.where(visited, np.inf, dist[order[-1]])
        nxt = int(np.argmin(row))
        order.append(nxt)
        visited[nxt] = True
    return np.asarray(order, dtype=np.int64)


def two_opt(order: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """First-improvement 2-opt until no exchange shortens the tour by more than 1e-12."""
    order = np.array(order, dtype=np.int64)
    n = order.size
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            a, b = order[i], order[i + 1]
            for j in range(i + 2, n if i > 0 else n - 1):
                c, d = order[j], order[(j + 1) % n]
                delta = dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d]
                if delta < -1e-12:
                    order[i + 1:j + 1] = order[i + 1:j + 1][::-1].copy()
                    a, b = order[i], order[i + 1]
                    improved = True
    return order


def is_two_opt_optimal(order, dist: np.ndarray) -> bool:
    order = np.asarray(order)
    n = order.size
    for i in range(n - 1):
        for j in range(i + 2, n if i > 0 else n - 1):
            a, b, c, d = order[i], order[i + 1], order[j], order[(j + 1) % n]
            if dist[a, c] + dist[b, d] - dist[a, b] - dist[c, d] < -1e-12:
                return False
    return True


def solve_heuristic(instance, seed: int = 0) -> Tour:
    """Nearest-neighbour construction from a seeded start node, then 2-opt."""
    coords = _coords(instance)
    n = coords.shape[0]
    if n < 3:
        raise InvalidInstanceError("need at least 3 nodes")
    dist = distance_matrix(coords)
    start = int(np.random.default_rng(seed).integers(n))
    return Tour(two_opt(nearest_neighbor_tour(dist, start), dist))


def project_unit_square(coords) -> np.ndarray:
    """Dimension-wise min-max map of a point set onto [0, 1]^2."""
    coords = np.asarray(coords, dtype=np.float64)
    lo = coords.min(axis=0)
    span = coords.max(axis=0) - lo
    for dim in range(coords.shape[1]):
        if not span[dim] > 0:
            raise DegenerateInstanceError(dim)
    return (coords - lo) / span


def batch_project(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project each instance of a (B, n, 2) array.

    Returns the projected array and a boolean mask of degenerate instances,
    whose rows are left as zeros.
    """
    lo = coords.min(axis=1, keepdims=True)
    span = coords.max(axis=1, keepdims=True) - lo
    bad = ~np.all(span > 0, axis=(1, 2)) | ~np.all(np.isfinite(coords), axis=(1, 2))
    safe = np.where(span > 0, span, 1.0)
    out = (coords - lo) / safe
    out[bad] = 0.0
    return out, bad


def regular_polygon(k: int, radius: float = 1.0) -> np.ndarray:
    theta = 2 * math.pi * np.arange(k) / k
    return radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
