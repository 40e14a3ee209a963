"""Explicit-dynamics oracle: a deformable 2-D lattice striking a rigid pole.

The scene is a mass-spring lattice (structural + shear springs) that flies
at a fixed rigid circular pole with penalty contact. Per-region sheet
thickness scales spring stiffness cubically and is exposed as a node
feature, geometry morphs reshape the reference lattice, and the pole's
lateral position and the impact speed vary per design sample.

Everything is computed with +,-,*,/ and sqrt only, in fixed order, so two
runs of the same design produce byte-identical trajectories on any IEEE
double platform.

Units: mm, ms, kg (forces in kN, energies in J).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .design import DesignSample, DesignSpace, lhs_sample
from .errors import ConfigError
from .mesh import MeshGraph, NodeRole, NodeState, Trajectory, estimate_velocity

TOY_DESIGN_SPACE = DesignSpace(
    names=(
        "pole_offset",
        "impact_speed",
        "thickness_face",
        "thickness_core",
        "morph_taper",
        "morph_bulge",
        "morph_skew",
        "morph_arch",
    ),
    lows=(-14.0, 5.0, 0.8, 0.8, -0.25, -3.0, -4.0, -3.0),
    highs=(14.0, 9.0, 1.8, 1.8, 0.25, 3.0, 4.0, 3.0),
)


@dataclass(frozen=True)
class OracleConfig:
    cells_x: int = 12
    cells_y: int = 6
    spacing: float = 8.0
    node_mass: float = 5e-4
    stiffness_base: float = 0.005
    shear_stiffness_frac: float = 0.4
    thickness_nominal: float = 1.2
    thickness_exponent: float = 3.0
    damping: float = 0.04
    pole_radius: float = 12.0
    pole_gap: float = 25.0
    pole_arc_nodes: int = 16
    penalty_stiffness: float = 2.0
    penalty_damping: float = 0.02
    penalty_layer_frac: float = 0.02
    face_region_cols: int = 3
    inner_dt: float = 0.02
    output_dt: float = 5.0
    horizon: int = 15

    def __post_init__(self):
        if self.inner_dt <= 0 or self.output_dt <= 0:
            raise ConfigError("timesteps must be positive")
        substeps = self.output_dt / self.inner_dt
        if abs(substeps - round(substeps)) > 1e-9:
            raise ConfigError("output_dt must be an integer multiple of inner_dt")

    @property
    def substeps(self) -> int:
        return int(round(self.output_dt / self.inner_dt))


@dataclass
class LatticeScene:
    """Everything simulate needs: graph, springs, masses and the pole."""

    graph: MeshGraph
    x0: np.ndarray
    v0: np.ndarray
    spring_i: np.ndarray
    spring_j: np.ndarray
    spring_k: np.ndarray
    spring_rest: np.ndarray
    masses: np.ndarray
    pole_center: np.ndarray
    pole_radius: float
    survival_pair: tuple


def _polygon_unit_coords(n_vertices: int) -> np.ndarray:
    """Unit-circle polygon via repeated half/double-angle sqrt identities.

    Avoids sin/cos so coordinates are bit-identical across libm versions.
    Supports the powers-of-two vertex counts used for pole rings.
    """
    if n_vertices < 4 or n_vertices & (n_vertices - 1):
        raise ConfigError("pole_arc_nodes must be a power of two >= 4")
    # cos/sin of the step angle 2*pi/n by halving from 90 degrees
    cos_a, sin_a = 0.0, 1.0  # angle pi/2, i.e. n = 4
    steps = n_vertices
    while steps > 4:
        # half-angle: cos(a/2) = sqrt((1+cos a)/2), sin(a/2) = sqrt((1-cos a)/2)
        cos_a, sin_a = np.sqrt((1.0 + cos_a) / 2.0), np.sqrt((1.0 - cos_a) / 2.0)
        steps //= 2
    coords = np.empty((n_vertices, 2))
    cx, sx = 1.0, 0.0
    for k in range(n_vertices):
        coords[k, 0] = cx
        coords[k, 1] = sx
        cx, sx = cx * cos_a - sx * sin_a, sx * cos_a + cx * sin_a
    return coords


def _chebyshev_encodings(ref: np.ndarray) -> np.ndarray:
    """Six polynomial encodings of min-max normalized coordinates."""
    lo = ref.min(axis=0)
    hi = ref.max(axis=0)
    span = np.where(hi - lo > 0.0, hi - lo, 1.0)
    c = 2.0 * (ref - lo) / span - 1.0
    cx, cy = c[:, 0], c[:, 1]
    return np.stack(
        [cx, cy, 2.0 * cx * cx - 1.0, 2.0 * cy * cy - 1.0, cx * cy, 4.0 * cx**3 - 3.0 * cx],
        axis=1,
    )


def build_scene(design: DesignSample, cfg: OracleConfig) -> LatticeScene:
    if not TOY_DESIGN_SPACE.contains(design.values) and design.names == TOY_DESIGN_SPACE.names:
        raise ConfigError(f"design sample {design.sample_id} outside the declared bounds")
    nx, ny = cfg.cells_x + 1, cfg.cells_y + 1
    s = cfg.spacing
    taper = design["morph_taper"]
    bulge = design["morph_bulge"]
    skew = design["morph_skew"]
    arch = design["morph_arch"]

    # reference lattice with polynomial morphs
    ref = np.empty((nx * ny, 2))
    for i in range(nx):
        xi = i / (nx - 1)
        for j in range(ny):
            eta = j / (ny - 1)
            x = i * s + bulge * 4.0 * eta * (1.0 - eta) * xi * xi + skew * (eta - 0.5)
            y_c = 0.5 * (ny - 1) * s
            y = y_c + (j * s - y_c) * (1.0 + taper * (xi - 0.5)) + arch * 4.0 * xi * (1.0 - xi)
            ref[i * ny + j] = (x, y)

    # per-node thickness: struck-face columns vs core
    thickness = np.empty(nx * ny)
    for i in range(nx):
        t = design["thickness_face"] if i >= nx - cfg.face_region_cols else design["thickness_core"]
        thickness[i * ny: (i + 1) * ny] = t

    # springs: structural grid plus shear diagonals
    spring_i, spring_j, spring_frac = [], [], []
    for i in range(nx):
        for j in range(ny):
            a = i * ny + j
            if i + 1 < nx:
                spring_i.append(a); spring_j.append((i + 1) * ny + j); spring_frac.append(1.0)
            if j + 1 < ny:
                spring_i.append(a); spring_j.append(a + 1); spring_frac.append(1.0)
            if i + 1 < nx and j + 1 < ny:
                spring_i.append(a); spring_j.append((i + 1) * ny + j + 1)
                spring_frac.append(cfg.shear_stiffness_frac)
                spring_i.append(a + 1); spring_j.append((i + 1) * ny + j)
                spring_frac.append(cfg.shear_stiffness_frac)
    spring_i = np.asarray(spring_i, dtype=np.int64)
    spring_j = np.asarray(spring_j, dtype=np.int64)
    pair_thickness = 0.5 * (thickness[spring_i] + thickness[spring_j])
    spring_k = (
        cfg.stiffness_base
        * np.asarray(spring_frac)
        * (pair_thickness / cfg.thickness_nominal) ** cfg.thickness_exponent
    )
    delta = ref[spring_j] - ref[spring_i]
    spring_rest = np.sqrt((delta * delta).sum(axis=1))

    # fixed rigid pole: ring of nodes on the circle, plus the analytic circle
    # used for penalty contact
    y_center = 0.5 * (ny - 1) * s + design["pole_offset"]
    pole_center = np.array([ref[:, 0].max() + cfg.pole_gap + cfg.pole_radius, y_center])
    ring = pole_center + cfg.pole_radius * _polygon_unit_coords(cfg.pole_arc_nodes)
    n_lattice = nx * ny
    positions = np.concatenate([ref, ring], axis=0)
    roles = np.concatenate([
        np.full(n_lattice, NodeRole.FREE, dtype=np.uint8),
        np.full(cfg.pole_arc_nodes, NodeRole.RIGID, dtype=np.uint8),
    ])
    thickness_all = np.concatenate([thickness, np.full(cfg.pole_arc_nodes, cfg.thickness_nominal)])

    # graph edges: both directions for every spring and pole-ring segment
    ring_i = n_lattice + np.arange(cfg.pole_arc_nodes)
    ring_j = n_lattice + (np.arange(cfg.pole_arc_nodes) + 1) % cfg.pole_arc_nodes
    und_i = np.concatenate([spring_i, ring_i])
    und_j = np.concatenate([spring_j, ring_j])
    edges = np.concatenate(
        [np.stack([und_i, und_j], axis=1), np.stack([und_j, und_i], axis=1)], axis=0)

    role_onehot = np.zeros((len(roles), 2))
    role_onehot[np.arange(len(roles)), roles] = 1.0
    static = np.concatenate(
        [role_onehot, thickness_all[:, None], _chebyshev_encodings(positions)], axis=1)

    graph = MeshGraph(edges=edges, node_role=roles, static_features=static,
                      reference_positions=positions)
    v0 = np.zeros_like(positions)
    v0[:n_lattice, 0] = design["impact_speed"]
    survival_pair = ((nx - 1) * ny + ny // 2, ny // 2)
    return LatticeScene(
        graph=graph, x0=positions.copy(), v0=v0,
        spring_i=spring_i, spring_j=spring_j, spring_k=spring_k, spring_rest=spring_rest,
        masses=np.full(len(roles), cfg.node_mass), pole_center=pole_center,
        pole_radius=cfg.pole_radius, survival_pair=survival_pair,
    )


def check_stability(scene: LatticeScene, cfg: OracleConfig):
    """Require inner_dt <= 2 / omega_max for the stiffest node, contact included."""
    incident = np.zeros(scene.graph.node_count)
    np.add.at(incident, scene.spring_i, scene.spring_k)
    np.add.at(incident, scene.spring_j, scene.spring_k)
    k_max = incident.max() + cfg.penalty_stiffness
    omega_max = np.sqrt(k_max / scene.masses.min())
    bound = 2.0 / omega_max
    if cfg.inner_dt > bound:
        raise ConfigError(
            f"inner_dt={cfg.inner_dt} exceeds the stability bound {bound:.4g} "
            f"(omega_max={omega_max:.4g})")


def _forces(scene: LatticeScene, x: np.ndarray) -> np.ndarray:
    forces = np.zeros_like(x)
    d = x[scene.spring_j] - x[scene.spring_i]
    length = np.sqrt((d * d).sum(axis=1))
    safe = np.maximum(length, 1e-12)
    f = (scene.spring_k * (length - scene.spring_rest) / safe)[:, None] * d
    np.add.at(forces, scene.spring_i, f)
    np.add.at(forces, scene.spring_j, -f)
    return forces


def _penalty_forces(scene: LatticeScene, x: np.ndarray, v: np.ndarray, free: np.ndarray,
                    cfg: OracleConfig) -> np.ndarray:
    """Spring-damper pole contact; total normal force clamped non-negative."""
    forces = np.zeros_like(x)
    d = x - scene.pole_center
    dist = np.sqrt((d * d).sum(axis=1))
    inside = free & (dist < scene.pole_radius)
    if inside.any():
        safe = np.maximum(dist[inside], 1e-12)
        normal = d[inside] / safe[:, None]
        depth = scene.pole_radius - dist[inside]
        v_out = (v[inside] * normal).sum(axis=1)
        f_n = np.maximum(cfg.penalty_stiffness * depth - cfg.penalty_damping * v_out, 0.0)
        forces[inside] = f_n[:, None] * normal
    return forces


def simulate_scene(scene: LatticeScene, cfg: OracleConfig,
                   return_velocities: bool = False):
    """Semi-implicit Euler integration; returns (horizon+1, N, 2) frames.

    With ``return_velocities`` the integrator's own frame-boundary velocities
    come back too (the stored dataset keeps only positions and v0).
    """
    check_stability(scene, cfg)
    free = scene.graph.free_mask
    x = scene.x0.copy()
    v = scene.v0.copy()
    inv_m = 1.0 / scene.masses[:, None]
    frames = np.empty((cfg.horizon + 1,) + x.shape)
    frames[0] = x
    vels = np.empty_like(frames) if return_velocities else None
    if vels is not None:
        vels[0] = v
    dt = cfg.inner_dt
    for frame in range(1, cfg.horizon + 1):
        for _ in range(cfg.substeps):
            forces = _forces(scene, x) + _penalty_forces(scene, x, v, free, cfg)
            accel = forces * inv_m - cfg.damping * v
            v[free] += dt * accel[free]
            x[free] += dt * v[free]
        frames[frame] = x
        if vels is not None:
            vels[frame] = v
    if return_velocities:
        return frames, vels
    return frames


def scene_energy(scene: LatticeScene, x: np.ndarray, v: np.ndarray, cfg: OracleConfig) -> float:
    """Kinetic + spring elastic + penalty elastic energy of one configuration."""
    kinetic = 0.5 * float((scene.masses[:, None] * v * v).sum())
    d = x[scene.spring_j] - x[scene.spring_i]
    length = np.sqrt((d * d).sum(axis=1))
    elastic = 0.5 * float((scene.spring_k * (length - scene.spring_rest) ** 2).sum())
    dd = x[scene.graph.free_mask] - scene.pole_center
    dist = np.sqrt((dd * dd).sum(axis=1))
    depth = np.maximum(scene.pole_radius - dist, 0.0)
    penalty = 0.5 * cfg.penalty_stiffness * float((depth * depth).sum())
    return kinetic + elastic + penalty


def max_pole_penetration(scene: LatticeScene, frames: np.ndarray) -> float:
    """Deepest frame-end incursion of any FREE node into the pole circle (mm)."""
    free = scene.graph.free_mask
    worst = 0.0
    for frame in frames:
        d = frame[free] - scene.pole_center
        dist = np.sqrt((d * d).sum(axis=1))
        worst = max(worst, float(np.maximum(scene.pole_radius - dist, 0.0).max()))
    return worst


def frames_to_trajectory(frames: np.ndarray, v0: np.ndarray, dt: float,
                         survival_pair, design: DesignSample | None) -> Trajectory:
    states = [NodeState(positions=frames[0], velocities=v0, time_index=0)]
    for t in range(1, frames.shape[0]):
        vel = estimate_velocity(frames[t], frames[t - 1], dt)
        states.append(NodeState(positions=frames[t], velocities=vel, time_index=t))
    return Trajectory(states=tuple(states), dt=dt, survival_pair=survival_pair, design=design)


def simulate(design: DesignSample, cfg: OracleConfig) -> tuple[MeshGraph, Trajectory]:
    """Run one design through the oracle; deterministic for fixed inputs."""
    scene = build_scene(design, cfg)
    frames = simulate_scene(scene, cfg)
    traj = frames_to_trajectory(frames, scene.v0, cfg.output_dt, scene.survival_pair, design)
    return scene.graph, traj


def generate_dataset(n: int, space: DesignSpace, cfg: OracleConfig, seed: int,
                     out_path: str | Path) -> dict:
    """Sample n designs with LHS, simulate each, write one container + manifest."""
    from .dataset import SampleRecord, write_container

    designs = lhs_sample(n, space, seed)
    records = []
    for design in designs:
        graph, traj = simulate(design, cfg)
        records.append(SampleRecord(sample_id=design.sample_id, graph=graph, trajectory=traj))
    out_path = Path(out_path)
    write_container(out_path, records, space.names)

    from .util import sha256_file

    manifest = {
        "n": n,
        "seed": seed,
        "container": str(out_path),
        "container_sha256": sha256_file(out_path),
        "design_names": list(space.names),
        "samples": [
            {"sample_id": d.sample_id, "design": [float(v) for v in d.values]}
            for d in designs
        ],
    }
    manifest_path = Path(str(out_path) + ".manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest
