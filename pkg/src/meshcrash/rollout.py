"""Closed-loop autoregressive rollout with forward Euler integration."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .contact import ContactParams, build_contacts, default_contact_radius
from .errors import DivergenceError, ShapeError
from .mesh import MeshGraph, NodeState, NormStats, Trajectory
from .models import CrashSurrogate


@dataclass
class RolloutResult:
    predicted: Trajectory
    per_step_contact_counts: list
    wall_time: float


def euler_step(state: NodeState, accel: np.ndarray, dt: float, roles: np.ndarray) -> NodeState:
    """v' = v + dt a, x' = x + dt v' for FREE nodes; RIGID nodes stay put."""
    accel = np.asarray(accel, dtype=np.float64)
    if accel.shape != state.positions.shape:
        raise ShapeError(f"euler_step: accel shape {accel.shape} vs state {state.positions.shape}")
    if not np.isfinite(accel).all():
        raise DivergenceError("euler_step: non-finite acceleration", step=state.time_index)
    free = np.asarray(roles) == 0
    v_next = np.where(free[:, None], state.velocities + dt * accel, state.velocities)
    x_next = np.where(free[:, None], state.positions + dt * v_next, state.positions)
    return NodeState(positions=x_next, velocities=v_next, time_index=state.time_index + 1)


def contact_params_for(model: CrashSurrogate, graph: MeshGraph) -> ContactParams:
    cfg = model.config
    radius = cfg.contact_radius if cfg.contact_radius > 0 else default_contact_radius(graph)
    return ContactParams(radius=radius, k=cfg.contact_k, alpha_init=cfg.contact_alpha_init)


def rollout(model: CrashSurrogate, graph: MeshGraph, x0: np.ndarray, v0: np.ndarray,
            horizon: int, dt: float, stats: NormStats,
            survival_pair: tuple[int, int] = (0, 0)) -> RolloutResult:
    """Roll the model forward ``horizon`` steps from (x0, v0).

    Contact families rebuild their ContactSet from the *predicted* geometry
    at every step. Any non-finite prediction aborts with the step index.
    """
    started = time.perf_counter()
    contact_params = contact_params_for(model, graph) if model.config.contact_enabled else None
    state = NodeState(positions=np.asarray(x0, dtype=np.float64),
                      velocities=np.asarray(v0, dtype=np.float64), time_index=0)
    states = [state]
    contact_counts = []
    for t in range(horizon):
        contacts = None
        if contact_params is not None:
            contacts = build_contacts(graph, state.positions, contact_params, built_at=t)
            contact_counts.append(len(contacts))
        accel_hat = model.predict(graph, state, stats, contacts)
        if not np.isfinite(accel_hat).all():
            raise DivergenceError("rollout: model produced non-finite accelerations", step=t)
        accel = accel_hat * stats.accel_std + stats.accel_mean
        state = euler_step(state, accel, dt, graph.node_role)
        if not (np.isfinite(state.positions).all() and np.isfinite(state.velocities).all()):
            raise DivergenceError("rollout: non-finite state", step=t + 1)
        states.append(state)
    predicted = Trajectory(states=tuple(states), dt=dt, survival_pair=survival_pair)
    return RolloutResult(predicted=predicted,
                         per_step_contact_counts=contact_counts,
                         wall_time=time.perf_counter() - started)


def drift_rollout(graph: MeshGraph, x0: np.ndarray, v0: np.ndarray, horizon: int, dt: float,
                  survival_pair: tuple[int, int] = (0, 0)) -> RolloutResult:
    """Zero-acceleration baseline: pure inertial motion with RIGID nodes pinned."""
    started = time.perf_counter()
    state = NodeState(positions=np.asarray(x0, dtype=np.float64),
                      velocities=np.asarray(v0, dtype=np.float64), time_index=0)
    states = [state]
    zero = np.zeros_like(state.positions)
    for _ in range(horizon):
        state = euler_step(state, zero, dt, graph.node_role)
        states.append(state)
    predicted = Trajectory(states=tuple(states), dt=dt, survival_pair=survival_pair)
    return RolloutResult(predicted=predicted, per_step_contact_counts=[],
                         wall_time=time.perf_counter() - started)
