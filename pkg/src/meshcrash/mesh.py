"""Structural graph, nodal states, feature assembly and normalization stats.

Edge convention: row ``(i, j)`` of ``MeshGraph.edges`` means *node i receives
from neighbor j*. The edge list always contains both directions, so message
passing over ``edges`` visits every ordered neighbor pair exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ConfigError, ShapeError, StatsNotFittedError

STD_FLOOR = 1e-8


class NodeRole(IntEnum):
    FREE = 0
    RIGID = 1


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MeshGraph:
    """Static structural connectivity plus per-node static features.

    Attributes
    ----------
    edges : (E, 2) int64
        Ordered pairs (receiver i, neighbor j); both directions present.
    node_role : (N,) uint8
        ``NodeRole.FREE`` or ``NodeRole.RIGID`` per node.
    static_features : (N, F) float64
        Per-node feature vector (role one-hot, thickness, position encodings).
    reference_positions : (N, dim) float64
        Undeformed coordinates in mm.
    """

    edges: np.ndarray
    node_role: np.ndarray
    static_features: np.ndarray
    reference_positions: np.ndarray

    def __post_init__(self):
        edges = np.ascontiguousarray(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        role = np.asarray(self.node_role, dtype=np.uint8)
        feats = np.asarray(self.static_features, dtype=np.float64)
        ref = np.asarray(self.reference_positions, dtype=np.float64)
        n = role.shape[0]
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ShapeError(f"static_features must be (N, F), got {feats.shape} for N={n}")
        if ref.ndim != 2 or ref.shape[0] != n:
            raise ShapeError(f"reference_positions must be (N, dim), got {ref.shape} for N={n}")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ConfigError("edge index out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ConfigError("self-loop edges are not allowed")
            pairs = set(map(tuple, edges.tolist()))
            if len(pairs) != edges.shape[0]:
                raise ConfigError("duplicate edges in edge list")
            for i, j in pairs:
                if (j, i) not in pairs:
                    raise ConfigError(f"edge ({i},{j}) present without its reverse")
        if not np.any(role == NodeRole.FREE):
            raise ConfigError("graph must contain at least one FREE node")
        object.__setattr__(self, "edges", _freeze(edges))
        object.__setattr__(self, "node_role", _freeze(role))
        object.__setattr__(self, "static_features", _freeze(feats))
        object.__setattr__(self, "reference_positions", _freeze(ref))

    @property
    def node_count(self) -> int:
        return self.node_role.shape[0]

    @property
    def dim(self) -> int:
        return self.reference_positions.shape[1]

    @property
    def free_mask(self) -> np.ndarray:
        return self.node_role == NodeRole.FREE

    @property
    def receivers(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def neighbors(self) -> np.ndarray:
        return self.edges[:, 1]

    def adjacency_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.edges.tolist()))

    def median_edge_length(self) -> float:
        if self.edges.shape[0] == 0:
            raise ConfigError("median_edge_length: graph has no edges")
        delta = self.reference_positions[self.edges[:, 1]] - self.reference_positions[self.edges[:, 0]]
        return float(np.median(np.sqrt((delta * delta).sum(axis=1))))


@dataclass(frozen=True)
class NodeState:
    """Positions (mm) and velocities (mm/ms) of all nodes at one timestep."""

    positions: np.ndarray
    velocities: np.ndarray
    time_index: int

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        vel = np.asarray(self.velocities, dtype=np.float64)
        if pos.shape != vel.shape:
            raise ShapeError(f"positions {pos.shape} and velocities {vel.shape} differ")
        if not (np.isfinite(pos).all() and np.isfinite(vel).all()):
            raise ShapeError("NodeState entries must be finite")
        if self.time_index < 0:
            raise ConfigError("time_index must be non-negative")
        object.__setattr__(self, "positions", _freeze(pos))
        object.__setattr__(self, "velocities", _freeze(vel))


@dataclass(frozen=True)
class Trajectory:
    """Ordered sequence of T+1 states plus design metadata."""

    states: tuple
    dt: float
    survival_pair: tuple[int, int]
    design: object = None

    def __post_init__(self):
        states = tuple(self.states)
        if not states:
            raise ConfigError("trajectory needs at least one state")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        for k, s in enumerate(states):
            if s.time_index != k:
                raise ConfigError(f"state {k} has time_index {s.time_index}")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "survival_pair", (int(self.survival_pair[0]), int(self.survival_pair[1])))

    @property
    def horizon(self) -> int:
        return len(self.states) - 1

    def positions_array(self) -> np.ndarray:
        """(T+1, N, dim) stacked positions."""
        return np.stack([s.positions for s in self.states])


@dataclass
class NormStats:
    """Normalization statistics fitted on the training split."""

    accel_mean: np.ndarray
    accel_std: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray

    def __post_init__(self):
        for name in ("accel_mean", "accel_std", "feature_mean", "feature_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.accel_std <= 0.0) or np.any(self.feature_std <= 0.0):
            raise ConfigError("std entries must be positive (floor applied when fitting)")


def estimate_velocity(x_t: np.ndarray, x_prev: np.ndarray, dt: float) -> np.ndarray:
    """Finite-difference velocity (x_t - x_prev) / dt."""
    x_t = np.asarray(x_t, dtype=np.float64)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if x_t.shape != x_prev.shape:
        raise ShapeError(f"estimate_velocity: shapes differ {x_t.shape} vs {x_prev.shape}")
    if dt <= 0:
        raise ConfigError(f"estimate_velocity: dt must be positive, got {dt}")
    return (x_t - x_prev) / dt


def target_accelerations(traj: Trajectory) -> np.ndarray:
    """(T, N, dim) accelerations implied by the stored states under Euler."""
    accs = []
    for t in range(traj.horizon):
        v_next = traj.states[t + 1].velocities
        v_cur = traj.states[t].velocities
        accs.append((v_next - v_cur) / traj.dt)
    return np.stack(accs)


def fit_norm_stats(train_samples: list[tuple[MeshGraph, Trajectory]]) -> NormStats:
    """Per-component mean/std of FREE-node accelerations and input velocities.

    Uses only FREE-node transitions; population std with a 1e-8 floor.
    The caller is responsible for passing training samples only.
    """
    if not train_samples:
        raise ConfigError("fit_norm_stats: need at least one trajectory")
    accel_rows = []
    vel_rows = []
    for graph, traj in train_samples:
        if traj.horizon < 1:
            raise ConfigError("fit_norm_stats: trajectory has no transitions")
        mask = graph.free_mask
        acc = target_accelerations(traj)
        for t in range(traj.horizon):
            accel_rows.append(acc[t][mask])
            vel_rows.append(traj.states[t].velocities[mask])
    accel = np.concatenate(accel_rows, axis=0)
    vel = np.concatenate(vel_rows, axis=0)
    return NormStats(
        accel_mean=accel.mean(axis=0),
        accel_std=np.maximum(accel.std(axis=0), STD_FLOOR),
        feature_mean=vel.mean(axis=0),
        feature_std=np.maximum(vel.std(axis=0), STD_FLOOR),
    )


def assemble_node_features(graph: MeshGraph, state: NodeState, stats: NormStats,
                           n_static: int | None = None) -> np.ndarray:
    """Normalized velocity components ++ (a prefix of) static features.

    ``n_static`` selects how many static columns a model consumes; the
    resulting width dim + n_static is the model's input feature dimension.
    """
    if stats is None:
        raise StatsNotFittedError("assemble_node_features: stats not fitted")
    if n_static is None:
        n_static = graph.static_features.shape[1]
    if n_static > graph.static_features.shape[1]:
        raise ConfigError(
            f"requested {n_static} static columns, graph provides {graph.static_features.shape[1]}")
    vel = (state.velocities - stats.feature_mean) / stats.feature_std
    return np.concatenate([vel, graph.static_features[:, :n_static]], axis=1)


def build_edge_features(graph: MeshGraph, state: NodeState) -> np.ndarray:
    """Per-edge [x_j - x_i, |x_j - x_i|, u_j - u_i, |u_j - u_i|], u = x - ref."""
    x = state.positions
    if x.shape[0] != graph.node_count:
        raise ShapeError("build_edge_features: state and graph node counts differ")
    i = graph.edges[:, 0]
    j = graph.edges[:, 1]
    dx = x[j] - x[i]
    u = x - graph.reference_positions
    du = u[j] - u[i]
    dx_norm = np.sqrt((dx * dx).sum(axis=1, keepdims=True))
    du_norm = np.sqrt((du * du).sum(axis=1, keepdims=True))
    return np.concatenate([dx, dx_norm, du, du_norm], axis=1)


def check_rigid_invariance(traj: Trajectory, graph: MeshGraph, atol: float = 0.0) -> bool:
    """True when every RIGID node keeps its frame-0 position in all states."""
    rigid = ~graph.free_mask
    if not rigid.any():
        return True
    ref = traj.states[0].positions[rigid]
    for s in traj.states[1:]:
        if not np.allclose(s.positions[rigid], ref, rtol=0.0, atol=atol):
            return False
    return True
