"""Generic sparse contact block: search, filtering and residual injection.

Contact pairs are stored *directed*: each node keeps at most ``k`` pairs in
which it is the source, ranked by distance. The residual message for a pair
is computed from (h_src, h_partner, distance, gap, unit offset src->partner)
and scatter-added into the source row only; the mirrored directed pair, when
it survives its own top-k, delivers the partner's message with the offset
sign flipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .errors import ConfigError
from .mesh import MeshGraph

THICKNESS_COLUMN = 2  # static feature layout: role one-hot (2) then thickness


@dataclass(frozen=True)
class ContactParams:
    radius: float
    k: int
    alpha_init: float = 1e-3

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError(f"contact radius must be positive, got {self.radius}")
        if self.k < 1:
            raise ConfigError(f"contact k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class ContactSet:
    """Sparse directed proximity pairs for one timestep."""

    src: np.ndarray
    dst: np.ndarray
    distance: np.ndarray
    gap: np.ndarray
    built_at: int
    k: int

    def __len__(self) -> int:
        return len(self.src)

    def rows(self):
        """(i, j, distance, gap) tuples, e.g. for the CSV debug dump."""
        return [
            (int(i), int(j), float(d), float(g))
            for i, j, d, g in zip(self.src, self.dst, self.distance, self.gap)
        ]


def empty_contact_set(built_at: int = 0, k: int = 1) -> ContactSet:
    z = np.zeros(0)
    zi = np.zeros(0, dtype=np.int64)
    return ContactSet(src=zi, dst=zi.copy(), distance=z, gap=z.copy(), built_at=built_at, k=k)


def default_contact_radius(graph: MeshGraph) -> float:
    """3x the median undeformed mesh edge length."""
    return 3.0 * graph.median_edge_length()


def radius_search(positions: np.ndarray, radius: float,
                  exclude: set | None = None) -> list[tuple[int, int, float]]:
    """All unordered pairs within ``radius``, minus excluded (mesh-adjacent) pairs.

    Uses a uniform spatial hash with cell size = radius; the result is the
    same pair set as the quadratic definition. Pairs come back sorted as
    (i, j, distance) with i < j.
    """
    if radius <= 0:
        raise ConfigError(f"radius_search: radius must be positive, got {radius}")
    positions = np.asarray(positions, dtype=np.float64)
    n, dim = positions.shape
    cells: dict[tuple, list[int]] = {}
    keys = np.floor(positions / radius).astype(np.int64)
    for idx in range(n):
        cells.setdefault(tuple(keys[idx]), []).append(idx)

    offsets = np.array(np.meshgrid(*([[-1, 0, 1]] * dim))).T.reshape(-1, dim)
    r2 = radius * radius
    out: list[tuple[int, int, float]] = []
    for key, members in cells.items():
        neighborhood: list[int] = []
        base = np.asarray(key)
        for off in offsets:
            neighborhood.extend(cells.get(tuple(base + off), ()))
        for i in members:
            xi = positions[i]
            for j in neighborhood:
                if j <= i:
                    continue
                d = positions[j] - xi
                d2 = float(d @ d)
                if d2 <= r2:
                    if exclude is not None and (i, j) in exclude:
                        continue
                    out.append((i, j, float(np.sqrt(d2))))
    out.sort()
    return out


def radius_search_bruteforce(positions: np.ndarray, radius: float,
                             exclude: set | None = None) -> list[tuple[int, int, float]]:
    """Quadratic reference implementation of :func:`radius_search`."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            d = positions[j] - positions[i]
            dist = float(np.sqrt(d @ d))
            if dist <= radius:
                if exclude is not None and (i, j) in exclude:
                    continue
                out.append((i, j, dist))
    return out


def filter_and_sparsify(candidates: list[tuple[int, int, float]], graph: MeshGraph,
                        params: ContactParams, built_at: int = 0) -> ContactSet:
    """Thickness-aware gap, then per-source top-k over directed pairs.

    gap = distance - (t_i + t_j)/2, clamped at zero: pairs closer than the
    thickness sum are the most important ones and are kept with gap 0.
    Ties break by smaller distance, then smaller partner index.
    """
    thickness = graph.static_features[:, THICKNESS_COLUMN]
    per_source: dict[int, list[tuple[float, int, float]]] = {}
    for i, j, dist in candidates:
        gap = max(dist - 0.5 * (thickness[i] + thickness[j]), 0.0)
        per_source.setdefault(i, []).append((dist, j, gap))
        per_source.setdefault(j, []).append((dist, i, gap))

    src, dst, distance, gap_out = [], [], [], []
    for node in sorted(per_source):
        ranked = sorted(per_source[node])  # (distance, partner) ordering
        for dist, partner, gap in ranked[: params.k]:
            src.append(node)
            dst.append(partner)
            distance.append(dist)
            gap_out.append(gap)
    return ContactSet(
        src=np.asarray(src, dtype=np.int64),
        dst=np.asarray(dst, dtype=np.int64),
        distance=np.asarray(distance, dtype=np.float64),
        gap=np.asarray(gap_out, dtype=np.float64),
        built_at=built_at,
        k=params.k,
    )


def build_contacts(graph: MeshGraph, positions: np.ndarray, params: ContactParams,
                   built_at: int = 0) -> ContactSet:
    """radius search + filter/sparsify against one predicted configuration."""
    candidates = radius_search(positions, params.radius, exclude=graph.adjacency_set())
    return filter_and_sparsify(candidates, graph, params, built_at=built_at)


def contact_pair_features(positions: Tensor, contacts: ContactSet, graph: MeshGraph) -> Tensor:
    """Differentiable per-pair [unit offset, distance, gap] from current positions."""
    xi = engine.gather_rows(positions, contacts.src)
    xj = engine.gather_rows(positions, contacts.dst)
    offset = engine.sub(xj, xi)
    dist = engine.row_norm(offset)
    thickness = graph.static_features[:, THICKNESS_COLUMN]
    pair_thickness = 0.5 * (thickness[contacts.src] + thickness[contacts.dst])
    raw_gap = engine.sub(dist, engine.constant(pair_thickness[:, None]))
    gap = engine.relu(raw_gap)
    unit = engine.mul(offset, engine.reciprocal(engine.clamp_min(dist, 1e-9)))
    return engine.concat([unit, dist, gap], axis=1)


def contact_residual(h: Tensor, contacts: ContactSet, alpha: Tensor, pair_mlp,
                     positions: Tensor, graph: MeshGraph) -> Tensor:
    """H + alpha * scatter(pair messages); exactly H when alpha or pairs vanish.

    During inference an exactly-zero alpha short-circuits so the gated-off
    block is a true identity; with grads on, the arithmetic path is kept so
    alpha still receives its gradient.
    """
    if len(contacts) == 0:
        return h
    if not engine.grad_enabled() and float(alpha.values.reshape(-1)[0]) == 0.0:
        return h
    n = h.values.shape[0]
    hi = engine.gather_rows(h, contacts.src)
    hj = engine.gather_rows(h, contacts.dst)
    feats = contact_pair_features(positions, contacts, graph)
    messages = pair_mlp(engine.concat([hi, hj, feats], axis=1))
    delta = engine.scatter_add_rows(messages, contacts.src, n)
    return engine.add(h, engine.mul(alpha, delta))
