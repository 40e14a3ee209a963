"""Versioned binary container for trajectory sets.

One container file stores a set of trajectories sharing a topology (edge
list and node roles) while geometry, static features and motion vary per
sample. All numbers are little-endian; floats are 64-bit. A JSON sidecar
(`<path>.json`) mirrors the header for quick inspection.

Layout::

    magic      8s   b"MCRSHDS1"
    version    u32
    dim        u32
    node_count u32
    edge_count u32
    T          u32   (frames = T + 1)
    n_traj     u32
    n_static   u32
    n_design   u32
    dt         f64
    edges      u32[edge_count * 2]
    roles      u8[node_count]
    per trajectory:
        sample_id  u32
        design     f64[n_design]
        survival   u32[2]
        reference  f64[node_count * dim]
        static     f64[node_count * n_static]
        v0         f64[node_count * dim]
        positions  f64[(T+1) * node_count * dim]
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .design import DesignSample
from .errors import ConfigError
from .mesh import MeshGraph, NodeState, Trajectory, estimate_velocity

MAGIC = b"MCRSHDS1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIIId")


@dataclass
class SampleRecord:
    """One design sample: its graph, trajectory and id."""

    sample_id: int
    graph: MeshGraph
    trajectory: Trajectory

    @property
    def design(self) -> DesignSample:
        return self.trajectory.design


@dataclass
class TrajectorySet:
    """A loaded container: shared topology plus per-sample records."""

    dim: int
    dt: float
    horizon: int
    design_names: tuple
    samples: list

    def by_id(self, sample_id: int) -> SampleRecord:
        for rec in self.samples:
            if rec.sample_id == sample_id:
                return rec
        raise KeyError(f"sample id {sample_id} not in container")


def _f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def write_container(path: str | Path, records: list[SampleRecord], design_names) -> None:
    if not records:
        raise ConfigError("write_container: no records")
    first = records[0]
    graph = first.graph
    dim = graph.dim
    n = graph.node_count
    horizon = first.trajectory.horizon
    dt = first.trajectory.dt
    n_static = graph.static_features.shape[1]
    n_design = len(design_names)
    for rec in records:
        g, tr = rec.graph, rec.trajectory
        if g.node_count != n or g.dim != dim or tr.horizon != horizon or tr.dt != dt:
            raise ConfigError("write_container: records disagree on shape, horizon or dt")
        if not np.array_equal(g.edges, graph.edges) or not np.array_equal(g.node_role, graph.node_role):
            raise ConfigError("write_container: records must share topology and roles")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, dim, n, graph.edges.shape[0],
                             horizon, len(records), n_static, n_design, dt))
        f.write(np.ascontiguousarray(graph.edges, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(graph.node_role, dtype="u1").tobytes())
        for rec in records:
            g, tr = rec.graph, rec.trajectory
            f.write(struct.pack("<I", rec.sample_id))
            design_values = tr.design.values if tr.design is not None else np.zeros(n_design)
            if len(design_values) != n_design:
                raise ConfigError("write_container: design vector length mismatch")
            f.write(_f64(design_values))
            f.write(struct.pack("<II", *tr.survival_pair))
            f.write(_f64(g.reference_positions))
            f.write(_f64(g.static_features))
            f.write(_f64(tr.states[0].velocities))
            f.write(_f64(tr.positions_array()))

    sidecar = {
        "magic": MAGIC.decode("ascii"),
        "format_version": FORMAT_VERSION,
        "dim": dim,
        "node_count": n,
        "edge_count": int(graph.edges.shape[0]),
        "T": horizon,
        "n_traj": len(records),
        "n_static_features": n_static,
        "n_design_vars": n_design,
        "dt": dt,
        "design_names": list(design_names),
        "sample_ids": [rec.sample_id for rec in records],
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")


def _read_f64(f, count) -> np.ndarray:
    data = f.read(8 * count)
    if len(data) != 8 * count:
        raise ConfigError("container truncated")
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


def read_container(path: str | Path) -> TrajectorySet:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ConfigError(f"{path}: not a trajectory container (short header)")
        magic, version, dim, n, n_edges, horizon, n_traj, n_static, n_design, dt = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported container version {version}")
        edges = np.frombuffer(f.read(4 * 2 * n_edges), dtype="<u4").astype(np.int64).reshape(n_edges, 2)
        roles = np.frombuffer(f.read(n), dtype="u1").copy()

        sidecar_path = Path(str(path) + ".json")
        design_names: tuple = ()
        if sidecar_path.exists():
            with open(sidecar_path, "r", encoding="utf-8") as sf:
                design_names = tuple(json.load(sf).get("design_names", ()))

        samples = []
        for _ in range(n_traj):
            (sample_id,) = struct.unpack("<I", f.read(4))
            design_values = _read_f64(f, n_design)
            survival = struct.unpack("<II", f.read(8))
            ref = _read_f64(f, n * dim).reshape(n, dim)
            static = _read_f64(f, n * n_static).reshape(n, n_static)
            v0 = _read_f64(f, n * dim).reshape(n, dim)
            pos = _read_f64(f, (horizon + 1) * n * dim).reshape(horizon + 1, n, dim)

            graph = MeshGraph(edges=edges, node_role=roles, static_features=static,
                              reference_positions=ref)
            design = DesignSample(values=design_values, sample_id=sample_id,
                                  names=design_names or tuple(f"x{i}" for i in range(n_design)))
            states = [NodeState(positions=pos[0], velocities=v0, time_index=0)]
            for t in range(1, horizon + 1):
                vel = estimate_velocity(pos[t], pos[t - 1], dt)
                states.append(NodeState(positions=pos[t], velocities=vel, time_index=t))
            traj = Trajectory(states=tuple(states), dt=dt, survival_pair=survival, design=design)
            samples.append(SampleRecord(sample_id=sample_id, graph=graph, trajectory=traj))

    return TrajectorySet(dim=dim, dt=dt, horizon=horizon,
                         design_names=design_names, samples=samples)
