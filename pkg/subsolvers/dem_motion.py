"""
Soft-sphere discrete element dynamics and inter-particle heat exchange
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, GeometryError, StepError
from .properties import SIGMA_SB

logger = logging.getLogger("thermodem.dem")

_OFFSETS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64)


@dataclass
class ContactModelParams:
    normal_stiffness: float
    normal_damping: float = 0.0
    tangential_stiffness: float = 0.0
    friction: float = 0.0
    model: Literal["linear", "hertz"] = "linear"

    def __post_init__(self):
        violations = [
            f"{name} must be >= 0, got {getattr(self, name)}"
            for name in ("normal_stiffness", "normal_damping", "tangential_stiffness", "friction")
            if getattr(self, name) < 0.0
        ]
        if self.model not in ("linear", "hertz"):
            violations.append(f"unknown contact model '{self.model}'")
        if violations:
            raise ConfigurationError(violations, source="contact model")

    @classmethod
    def from_restitution(cls, stiffness: float, restitution: float, effective_mass: float, **kwargs):
        """Linear spring-dashpot with the damping giving restitution e for a pair of effective mass"""
        if not 0.0 < restitution <= 1.0:
            raise ConfigurationError(f"restitution must lie in (0, 1], got {restitution}")
        ln_e = math.log(restitution)
        zeta = -ln_e / math.sqrt(math.pi ** 2 + ln_e ** 2)
        damping = 2.0 * zeta * math.sqrt(stiffness * effective_mass)
        return cls(normal_stiffness=stiffness, normal_damping=damping, **kwargs)


@dataclass
class Wall:
    """Plane through point with unit normal pointing into the particle region"""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise GeometryError("wall normal must be non-zero")
        self.normal = n / norm


@dataclass
class RigidState:
    """Translational and rotational state of every particle, one row per particle"""

    position: np.ndarray
    velocity: np.ndarray
    angular_velocity: np.ndarray
    mass: np.ndarray
    inertia: np.ndarray
    radius: np.ndarray
    fixed: np.ndarray = None

    def __post_init__(self):
        n = self.position.shape[0]
        if self.fixed is None:
            self.fixed = np.zeros(n, dtype=bool)
        bad = [name for name in ("mass", "inertia", "radius") if np.any(getattr(self, name) <= 0.0)]
        if bad:
            raise ConfigurationError([f"{name} must be positive for every particle" for name in bad])

    @classmethod
    def spheres(cls, positions, radii, density: float, velocities=None, fixed=None) -> "RigidState":
        x = np.atleast_2d(np.asarray(positions, dtype=float))
        r = np.broadcast_to(np.asarray(radii, dtype=float), x.shape[:1]).copy()
        m = density * 4.0 / 3.0 * math.pi * r ** 3
        v = np.zeros_like(x) if velocities is None else np.atleast_2d(np.asarray(velocities, dtype=float)).copy()
        f = None if fixed is None else np.broadcast_to(np.asarray(fixed, dtype=bool), x.shape[:1]).copy()
        return cls(x.copy(), v, np.zeros_like(x), m, 0.4 * m * r ** 2, r, f)

    @property
    def count(self) -> int:
        return self.position.shape[0]

    def copy(self) -> "RigidState":
        return RigidState(
            self.position.copy(),
            self.velocity.copy(),
            self.angular_velocity.copy(),
            self.mass.copy(),
            self.inertia.copy(),
            self.radius.copy(),
            self.fixed.copy(),
        )

    def update_spheres(self, radii: np.ndarray, masses: np.ndarray) -> None:
        """Follow shrinking or reacting particles"""
        self.radius = np.asarray(radii, dtype=float).copy()
        self.mass = np.asarray(masses, dtype=float).copy()
        self.inertia = 0.4 * self.mass * self.radius ** 2

    def linear_momentum(self) -> np.ndarray:
        return (self.mass[:, None] * self.velocity).sum(axis=0)

    def angular_momentum(self) -> np.ndarray:
        orbital = np.cross(self.position, self.mass[:, None] * self.velocity).sum(axis=0)
        spin = (self.inertia[:, None] * self.angular_velocity).sum(axis=0)
        return orbital + spin

    def kinetic_energy(self) -> float:
        return float(
            0.5 * (self.mass * (self.velocity ** 2).sum(axis=1)).sum()
            + 0.5 * (self.inertia * (self.angular_velocity ** 2).sum(axis=1)).sum()
        )


@dataclass
class Contact:
    i: int
    j: int  # particle index, or -(wall index + 1)
    overlap: float
    normal: np.ndarray
    relative_velocity: np.ndarray


@dataclass
class ContactSet:
    """Particle-particle and particle-wall contacts plus the heat-exchange neighbour list"""

    i: np.ndarray
    j: np.ndarray
    overlap: np.ndarray
    normal: np.ndarray
    relative_velocity: np.ndarray
    wall_i: np.ndarray
    wall_k: np.ndarray
    wall_overlap: np.ndarray
    wall_normal: np.ndarray
    wall_relative_velocity: np.ndarray
    neighbors: np.ndarray  # (M, 2), i < j
    neighbor_distance: np.ndarray

    def __len__(self) -> int:
        return self.i.size + self.wall_i.size

    def __iter__(self) -> Iterator[Contact]:
        for n in range(self.i.size):
            yield Contact(int(self.i[n]), int(self.j[n]), float(self.overlap[n]), self.normal[n],
                          self.relative_velocity[n])
        for n in range(self.wall_i.size):
            yield Contact(int(self.wall_i[n]), -int(self.wall_k[n]) - 1, float(self.wall_overlap[n]),
                          self.wall_normal[n], self.wall_relative_velocity[n])

    def pair_keys(self) -> set:
        return {(int(a), int(b)) for a, b in zip(self.i, self.j)}


def _expand_ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    offsets = np.repeat(starts - (np.cumsum(counts) - counts), counts)
    return offsets + np.arange(total)


def neighbor_pairs(position: np.ndarray, radius: np.ndarray, cutoff_factor: float = 1.5) -> Tuple[np.ndarray, np.ndarray]:
    """
    All pairs i < j with |x_i - x_j| < cutoff_factor (R_i + R_j), by uniform-cell binning.

    Cells are as wide as the largest possible cutoff, so only the 27 surrounding
    cells need to be searched.
    """
    n = position.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    size = 2.0 * cutoff_factor * float(radius.max())
    lo = position.min(axis=0)
    cell = np.floor((position - lo) / size).astype(np.int64)
    dims = cell.max(axis=0) + 1

    def linear(c):
        return (c[..., 0] * dims[1] + c[..., 1]) * dims[2] + c[..., 2]

    keys = linear(cell)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]

    owners, candidates = [], []
    for off in _OFFSETS:
        nb = cell + off
        valid = np.all((nb >= 0) & (nb < dims), axis=1)
        nb_keys = linear(nb[valid])
        start = np.searchsorted(sorted_keys, nb_keys, side="left")
        stop = np.searchsorted(sorted_keys, nb_keys, side="right")
        counts = stop - start
        idx = np.flatnonzero(valid)
        owners.append(np.repeat(idx, counts))
        candidates.append(order[_expand_ranges(start, counts)])
    a = np.concatenate(owners)
    b = np.concatenate(candidates)
    keep = a < b
    a, b = a[keep], b[keep]
    d = np.linalg.norm(position[b] - position[a], axis=1)
    close = d < cutoff_factor * (radius[a] + radius[b])
    pairs = np.stack([a[close], b[close]], axis=1)
    dist = d[close]
    sort = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[sort], dist[sort]


def all_pairs_neighbors(position: np.ndarray, radius: np.ndarray, cutoff_factor: float = 1.5) -> set:
    """O(N^2) reference used to check the binned search"""
    out = set()
    n = position.shape[0]
    for a in range(n):
        for b in range(a + 1, n):
            if np.linalg.norm(position[b] - position[a]) < cutoff_factor * (radius[a] + radius[b]):
                out.add((a, b))
    return out


def _surface_velocity(state: RigidState, idx: np.ndarray, arm: np.ndarray) -> np.ndarray:
    return state.velocity[idx] + np.cross(state.angular_velocity[idx], arm)


def detect_contacts(state: RigidState, walls: Sequence[Wall] = (), cutoff_factor: float = 1.5) -> ContactSet:
    pairs, dist = neighbor_pairs(state.position, state.radius, cutoff_factor)
    i, j = pairs[:, 0], pairs[:, 1]
    touching = dist < state.radius[i] + state.radius[j]
    ci, cj, cd = i[touching], j[touching], dist[touching]
    if np.any(cd == 0.0):
        k = int(np.argmax(cd == 0.0))
        raise GeometryError(f"particles {ci[k]} and {cj[k]} have coincident centres")
    normal = (state.position[cj] - state.position[ci]) / cd[:, None] if cd.size else np.zeros((0, 3))
    overlap = state.radius[ci] + state.radius[cj] - cd
    arm_i = (state.radius[ci] - 0.5 * overlap)[:, None] * normal
    arm_j = -(state.radius[cj] - 0.5 * overlap)[:, None] * normal
    rel = _surface_velocity(state, ci, arm_i) - _surface_velocity(state, cj, arm_j)

    wi, wk, wo, wn = [], [], [], []
    for k, wall in enumerate(walls):
        gap = (state.position - wall.point) @ wall.normal
        hit = np.flatnonzero(gap < state.radius)
        wi.append(hit)
        wk.append(np.full(hit.size, k, dtype=np.int64))
        wo.append(state.radius[hit] - gap[hit])
        wn.append(np.broadcast_to(-wall.normal, (hit.size, 3)))
    if walls:
        wall_i = np.concatenate(wi)
        wall_k = np.concatenate(wk)
        wall_overlap = np.concatenate(wo)
        wall_normal = np.concatenate(wn).reshape(-1, 3)
    else:
        wall_i = wall_k = np.zeros(0, dtype=np.int64)
        wall_overlap = np.zeros(0)
        wall_normal = np.zeros((0, 3))
    wall_arm = (state.radius[wall_i] - 0.5 * wall_overlap)[:, None] * wall_normal
    wall_rel = _surface_velocity(state, wall_i, wall_arm)

    return ContactSet(ci, cj, overlap, normal, rel, wall_i, wall_k, wall_overlap, wall_normal, wall_rel,
                      pairs, dist)


@dataclass
class ContactForces:
    force: np.ndarray  # (N, 3)
    torque: np.ndarray  # (N, 3)
    pair_force: np.ndarray  # force on i for each particle pair contact
    wall_force: np.ndarray


class ContactModel:
    """Spring-dashpot normal law with a history-tracking Coulomb tangential spring"""

    def __init__(self, params: ContactModelParams, logger: Optional[logging.Logger] = None):
        self.params = params
        self.logger = logger or logging.getLogger("thermodem.dem")
        self.history: Dict[Tuple[int, int], np.ndarray] = {}

    def _normal(self, overlap: np.ndarray, approach: np.ndarray) -> np.ndarray:
        p = self.params
        spring = p.normal_stiffness * (overlap ** 1.5 if p.model == "hertz" else overlap)
        return np.clip(spring + p.normal_damping * approach, 0.0, None) * (overlap > 0.0)

    def _tangential(self, keys, normal, rel, fn, dt) -> np.ndarray:
        p = self.params
        m = len(keys)
        if m == 0 or p.tangential_stiffness == 0.0:
            for key in keys:
                self.history.pop(key, None)
            return np.zeros((m, 3))
        xi = np.array([self.history.get(k, np.zeros(3)) for k in keys]).reshape(m, 3)
        xi = xi - (xi * normal).sum(axis=1)[:, None] * normal
        vt = rel - (rel * normal).sum(axis=1)[:, None] * normal
        xi = xi + vt * dt
        ft = -p.tangential_stiffness * xi
        mag = np.linalg.norm(ft, axis=1)
        cap = p.friction * fn
        slip = mag > cap
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(slip & (mag > 0.0), cap / mag, 1.0)
        ft = ft * ratio[:, None]
        xi = np.where(slip[:, None], -ft / p.tangential_stiffness, xi)
        for key, value in zip(keys, xi):
            self.history[key] = value
        return ft

    def evaluate(self, state: RigidState, contacts: ContactSet, dt: float = 0.0) -> ContactForces:
        n = state.count
        force = np.zeros((n, 3))
        torque = np.zeros((n, 3))
        live = set()

        i, j = contacts.i, contacts.j
        normal = contacts.normal
        fn = self._normal(contacts.overlap, (contacts.relative_velocity * normal).sum(axis=1))
        keys = [(int(a), int(b)) for a, b in zip(i, j)]
        live.update(keys)
        ft = self._tangential(keys, normal, contacts.relative_velocity, fn, dt)
        f_i = -fn[:, None] * normal + ft
        arm_i = (state.radius[i] - 0.5 * contacts.overlap)[:, None] * normal
        point = state.position[i] + arm_i
        np.add.at(force, i, f_i)
        np.add.at(force, j, -f_i)
        np.add.at(torque, i, np.cross(point - state.position[i], f_i))
        np.add.at(torque, j, np.cross(point - state.position[j], -f_i))

        wi = contacts.wall_i
        wn = contacts.wall_normal
        wfn = self._normal(contacts.wall_overlap, (contacts.wall_relative_velocity * wn).sum(axis=1))
        wkeys = [(int(a), -int(k) - 1) for a, k in zip(wi, contacts.wall_k)]
        live.update(wkeys)
        wft = self._tangential(wkeys, wn, contacts.wall_relative_velocity, wfn, dt)
        wf = -wfn[:, None] * wn + wft
        warm = (state.radius[wi] - 0.5 * contacts.wall_overlap)[:, None] * wn
        np.add.at(force, wi, wf)
        np.add.at(torque, wi, np.cross(warm, wf))

        for key in [k for k in self.history if k not in live]:
            del self.history[key]
        return ContactForces(force, torque, f_i, wf)


def contact_force(contacts: ContactSet, state: RigidState, params: ContactModelParams) -> ContactForces:
    """Stateless evaluation: tangential springs start from zero displacement"""
    return ContactModel(params).evaluate(state, contacts, 0.0)


def contact_substep(params: ContactModelParams, min_mass: float, min_radius: float = 1.0) -> float:
    """A tenth of the contact duration of the lightest pair"""
    effective = 0.5 * min_mass
    stiffness = params.normal_stiffness
    if params.model == "hertz":
        # linearized about an overlap of one percent of the radius
        stiffness = 1.5 * params.normal_stiffness * math.sqrt(0.01 * min_radius)
    if stiffness <= 0.0:
        return math.inf
    return math.pi * math.sqrt(effective / stiffness) / 10.0


ForceFn = Callable[[RigidState], Tuple[np.ndarray, np.ndarray]]


class MotionIntegrator:
    """
    Velocity-Verlet for translation and rotation.

    force_fn returns (force, torque) for a state; the forces of the previous
    call are reused for the opening half kick.
    """

    def __init__(self, force_fn: ForceFn, logger: Optional[logging.Logger] = None):
        self.force_fn = force_fn
        self.logger = logger or logging.getLogger("thermodem.dem")
        self._force: Optional[np.ndarray] = None
        self._torque: Optional[np.ndarray] = None

    def reset(self) -> None:
        self._force = self._torque = None

    def _evaluate(self, state: RigidState) -> Tuple[np.ndarray, np.ndarray]:
        force, torque = self.force_fn(state)
        bad = ~np.all(np.isfinite(force), axis=1) | ~np.all(np.isfinite(torque), axis=1)
        if np.any(bad):
            pid = int(np.argmax(bad))
            raise StepError(f"non-finite force on particle {pid}", module="dem", field="force", index=pid)
        return force, torque

    def step(self, state: RigidState, dt: float) -> RigidState:
        if dt <= 0.0:
            raise ConfigurationError(f"dt must be positive, got {dt}")
        if self._force is None or self._force.shape != state.position.shape:
            self._force, self._torque = self._evaluate(state)
        new = state.copy()
        free = ~new.fixed
        inv_m = np.where(free, 1.0 / new.mass, 0.0)[:, None]
        inv_i = np.where(free, 1.0 / new.inertia, 0.0)[:, None]
        new.velocity = new.velocity + 0.5 * dt * self._force * inv_m
        new.angular_velocity = new.angular_velocity + 0.5 * dt * self._torque * inv_i
        new.position = new.position + dt * new.velocity * free[:, None]
        self._force, self._torque = self._evaluate(new)
        new.velocity = new.velocity + 0.5 * dt * self._force * inv_m
        new.angular_velocity = new.angular_velocity + 0.5 * dt * self._torque * inv_i
        new.velocity[~free] = 0.0
        new.angular_velocity[~free] = 0.0
        return new


def integrate_motion(state: RigidState, force_fn: ForceFn, dt: float, steps: int = 1) -> RigidState:
    integrator = MotionIntegrator(force_fn)
    for _ in range(steps):
        state = integrator.step(state, dt)
    return state


def gravity_force(gravity: Sequence[float]) -> ForceFn:
    g = np.asarray(gravity, dtype=float)

    def force(state: RigidState):
        return state.mass[:, None] * g, np.zeros_like(state.position)

    return force


# -- heat exchange ---------------------------------------------------------------


def view_factor(radius_j: np.ndarray, distance: np.ndarray) -> np.ndarray:
    """Fraction of the sky of p covered by sphere j, from the subtended solid angle"""
    ratio = np.clip(radius_j / distance, 0.0, 1.0)
    return 0.5 * (1.0 - np.sqrt(1.0 - ratio ** 2))


def radiation_exchange(view: float, t_p: float, t_j: float) -> float:
    """Net radiative flux from p to j in W/m2"""
    return view * SIGMA_SB * (t_p ** 4 - t_j ** 4)


def series_conductivity(lambda_p, lambda_j):
    return 1.0 / (1.0 / np.asarray(lambda_p) + 1.0 / np.asarray(lambda_j))


@dataclass
class HeatExchange:
    q_cond: np.ndarray  # W/m2 leaving each particle
    q_rad: np.ndarray
    pair_power_cond: np.ndarray  # W from i to j per neighbour pair
    pair_power_rad: np.ndarray


def inter_particle_heat(
    state: RigidState,
    surface_temperature: np.ndarray,
    conductivity: np.ndarray,
    neighbors: np.ndarray,
    distance: np.ndarray,
    emissivity: Optional[np.ndarray] = None,
) -> HeatExchange:
    """
    Conductive and radiative exchange over the neighbour graph.

    Each pair exchanges one power value, counted positive for i and negative for
    j, so the ensemble conserves energy. The power is carried by the smaller
    sphere's surface; fluxes are that power over each particle's own surface.
    """
    n = state.count
    t = np.asarray(surface_temperature, dtype=float)
    lam = np.broadcast_to(np.asarray(conductivity, dtype=float), (n,))
    i, j = neighbors[:, 0], neighbors[:, 1]
    if np.any(distance <= 0.0):
        k = int(np.argmax(distance <= 0.0))
        raise GeometryError(f"particles {i[k]} and {j[k]} have coincident centres")

    r = state.radius
    f_ij = view_factor(r[j], distance)
    f_ji = view_factor(r[i], distance)
    total = np.zeros(n)
    np.add.at(total, i, f_ij)
    np.add.at(total, j, f_ji)
    norm = np.where(total > 1.0, 1.0 / np.where(total > 0.0, total, 1.0), 1.0)
    f_ij = f_ij * norm[i]
    f_ji = f_ji * norm[j]
    f_sym = 0.5 * (f_ij + f_ji)
    if emissivity is not None:
        eps = np.broadcast_to(np.asarray(emissivity, dtype=float), (n,))
        f_sym = f_sym * eps[i] * eps[j]
    area = 4.0 * math.pi * np.minimum(r[i], r[j]) ** 2
    p_rad = area * f_sym * SIGMA_SB * (t[i] ** 4 - t[j] ** 4)

    overlap = r[i] + r[j] - distance
    touching = overlap > 0.0
    gap = distance - np.clip(overlap, 0.0, None)
    if np.any(touching & (gap <= 0.0)):
        k = int(np.argmax(touching & (gap <= 0.0)))
        raise GeometryError(f"conduction length vanishes between particles {i[k]} and {j[k]}")
    with np.errstate(divide="ignore", invalid="ignore"):
        flux = np.where(touching, series_conductivity(lam[i], lam[j]) * (t[i] - t[j]) / gap, 0.0)
    p_cond = area * flux

    surface = 4.0 * math.pi * r ** 2
    q_cond = np.zeros(n)
    q_rad = np.zeros(n)
    np.add.at(q_cond, i, p_cond)
    np.add.at(q_cond, j, -p_cond)
    np.add.at(q_rad, i, p_rad)
    np.add.at(q_rad, j, -p_rad)
    return HeatExchange(q_cond / surface, q_rad / surface, p_cond, p_rad)


def write_snapshot(path: Path, state: RigidState, surface_temperature: np.ndarray, mass_remaining: np.ndarray) -> None:
    """One row per particle: id, position, radius, velocity, angular velocity, surfaceT, massRemaining"""
    ids = np.arange(state.count)
    table = np.column_stack([
        ids, state.position, state.radius, state.velocity, state.angular_velocity,
        np.asarray(surface_temperature), np.asarray(mass_remaining),
    ])
    header = "id,x,y,z,R,vx,vy,vz,wx,wy,wz,surfaceT,massRemaining"
    fmt = ["%d"] + ["%.10e"] * (table.shape[1] - 1)
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=fmt)
