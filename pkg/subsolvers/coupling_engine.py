"""
Two-way Euler-Lagrange coupling: gather the fluid at every particle, advance the
particle interiors and their motion, scatter what they released back to the
grid and advance the fluid, with a conservation audit per step.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from .closures import check_positive, nusselt, particle_drag_coefficient, sherwood, sphere_drag_coefficient
from .dem_motion import (
    ContactModel,
    ContactModelParams,
    MotionIntegrator,
    RigidState,
    Wall,
    contact_substep,
    detect_contacts,
    inter_particle_heat,
)
from .errors import ConfigurationError, CouplingError
from .fluid_continuum import (
    CouplingSources,
    FluidStepReport,
    MultiFluidSolver,
    PartitionWeights,
    PhaseField,
    PorosityMapper,
    StructuredGrid,
    SubgridState,
    compute_porosity,
    smagorinsky_k,
    subgrid_velocity,
)
from .kinetics import ReactionMechanism
from .particle_interior import InteriorState, ParticleBoundaryCondition, StepReport, step_interior
from .properties import mixture_heat_capacity

logger = logging.getLogger("thermodem.coupling")

DragModel = Literal["ergun-wen-yu", "single-sphere"]


# -- gather ----------------------------------------------------------------------------


def trilinear_weights(grid: StructuredGrid, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Flat cell indices (n, 8) and weights (n, 8) interpolating cell-centred data at points.
    Points within half a cell of the boundary take the boundary cell value along that axis.
    """
    points = np.atleast_2d(points)
    counts = np.asarray(grid.counts)
    rel = (points - grid.origin) / grid.spacing - 0.5
    lo = np.floor(rel).astype(np.int64)
    frac = rel - lo
    i0 = np.clip(lo, 0, counts - 1)
    i1 = np.clip(lo + 1, 0, counts - 1)
    idx = np.empty((points.shape[0], 8), dtype=np.int64)
    w = np.empty((points.shape[0], 8))
    corner = 0
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                ix = i1[:, 0] if a else i0[:, 0]
                iy = i1[:, 1] if b else i0[:, 1]
                iz = i1[:, 2] if c else i0[:, 2]
                idx[:, corner] = np.ravel_multi_index((ix, iy, iz), grid.counts)
                w[:, corner] = (
                    (frac[:, 0] if a else 1.0 - frac[:, 0])
                    * (frac[:, 1] if b else 1.0 - frac[:, 1])
                    * (frac[:, 2] if c else 1.0 - frac[:, 2])
                )
                corner += 1
    return idx, w


def interpolate(values: np.ndarray, idx: np.ndarray, w: np.ndarray, grid: StructuredGrid) -> np.ndarray:
    flat = np.asarray(values).reshape((grid.cell_count,) + np.asarray(values).shape[3:])
    picked = flat[idx]
    return (picked * w.reshape(w.shape + (1,) * (picked.ndim - 2))).sum(axis=1)


@dataclass
class LocalFluidSample:
    """Fluid seen by each particle; one row per particle"""

    carrier: str
    phase_names: List[str]
    temperature: np.ndarray  # (n,) carrier temperature
    velocity: np.ndarray  # (n, 3) carrier velocity, sub-grid part included
    porosity: np.ndarray  # (n,)
    phase_fractions: np.ndarray  # (n, phases)
    phase_density: np.ndarray  # (n, phases)
    phase_velocity: np.ndarray  # (n, phases, 3)
    phase_viscosity: np.ndarray  # (phases,)
    partial_density: Dict[str, np.ndarray]  # carrier species, kg per m3 of carrier
    density: np.ndarray
    viscosity: float
    conductivity: float
    heat_capacity: np.ndarray
    diffusivity: float
    pressure_gradient: np.ndarray  # (n, 3)

    @property
    def carrier_index(self) -> int:
        return self.phase_names.index(self.carrier)


def _cell_pressure_gradient(grid: StructuredGrid, pressure: np.ndarray) -> np.ndarray:
    comps = []
    for axis in range(3):
        if grid.counts[axis] > 1:
            comps.append(np.gradient(pressure, grid.spacing[axis], axis=axis))
        else:
            comps.append(np.zeros(grid.shape))
    return np.stack(comps, axis=-1)


def gather_local_fluid(
    grid: StructuredGrid,
    state: PhaseField,
    positions: np.ndarray,
    carrier: Optional[str] = None,
    subgrid: Optional[SubgridState] = None,
    use_subgrid: bool = False,
    rng=None,
    ids: Optional[Sequence[int]] = None,
) -> LocalFluidSample:
    """Trilinear sample of the fluid at every particle centre"""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    _, inside = grid.locate(positions) if positions.size else (None, np.ones(0, dtype=bool))
    if not np.all(inside):
        k = int(np.argmin(inside))
        pid = int(ids[k]) if ids is not None else k
        raise CouplingError(f"particle {pid} at {positions[k].tolist()} lies outside the fluid grid", particle_id=pid)

    carrier_phase = state.phase(carrier) if carrier else state.phases[-1]
    names = [p.name for p in state.phases]
    idx, w = trilinear_weights(grid, positions)

    fractions = np.stack([interpolate(p.fraction, idx, w, grid) for p in state.phases], axis=-1)
    density = np.stack([interpolate(p.density, idx, w, grid) for p in state.phases], axis=-1)
    velocity = np.stack([interpolate(p.cell_velocity(), idx, w, grid) for p in state.phases], axis=1)
    temperature = interpolate(carrier_phase.temperature, idx, w, grid)
    y = interpolate(carrier_phase.mass_fractions, idx, w, grid)
    rho_c = density[:, names.index(carrier_phase.name)]
    partial = {name: rho_c * y[:, i] for i, name in enumerate(carrier_phase.species_names)}
    u = velocity[:, names.index(carrier_phase.name)].copy()
    if use_subgrid:
        if subgrid is None:
            raise ConfigurationError("sub-grid velocity requested without a sub-grid field")
        k = interpolate(subgrid.k, idx, w, grid)
        u = u + subgrid_velocity(SubgridState(k, subgrid.filter_width), rng)
    cp = mixture_heat_capacity(carrier_phase.species, y, temperature)
    return LocalFluidSample(
        carrier=carrier_phase.name,
        phase_names=names,
        temperature=temperature,
        velocity=u,
        porosity=interpolate(state.porosity, idx, w, grid),
        phase_fractions=fractions,
        phase_density=density,
        phase_velocity=velocity,
        phase_viscosity=np.array([p.spec.viscosity for p in state.phases]),
        partial_density=partial,
        density=rho_c,
        viscosity=carrier_phase.spec.viscosity,
        conductivity=carrier_phase.spec.conductivity,
        heat_capacity=cp,
        diffusivity=carrier_phase.spec.diffusivity,
        pressure_gradient=interpolate(_cell_pressure_gradient(grid, state.pressure), idx, w, grid),
    )


# -- transfer coefficients ---------------------------------------------------------------


@dataclass
class TransferCoefficients:
    alpha: np.ndarray  # W/(m2 K)
    beta: np.ndarray  # m/s, every carrier species
    reynolds: np.ndarray
    nusselt: np.ndarray
    sherwood: np.ndarray
    drag: np.ndarray  # (n, phases) N s/m
    drag_force: np.ndarray  # (n, 3) N on each particle


def transfer_coefficients(
    diameter: np.ndarray,
    sample: LocalFluidSample,
    particle_velocity: np.ndarray,
    drag_model: DragModel = "ergun-wen-yu",
) -> TransferCoefficients:
    """Ranz-Marshall film coefficients against the carrier, drag against every phase"""
    d = np.asarray(diameter, dtype=float)
    v_p = np.atleast_2d(np.asarray(particle_velocity, dtype=float))
    check_positive(diameter=d, viscosity=sample.viscosity, conductivity=sample.conductivity,
                   density=sample.density, heat_capacity=sample.heat_capacity)
    slip = np.linalg.norm(sample.velocity - v_p, axis=1)
    if not np.all(np.isfinite(slip)):
        raise CouplingError("non-finite relative velocity", particle_id=int(np.argmax(~np.isfinite(slip))))
    re = sample.density * slip * d / sample.viscosity
    pr = sample.heat_capacity * sample.viscosity / sample.conductivity
    nu = nusselt(re, pr)
    alpha = nu * sample.conductivity / d
    if sample.diffusivity > 0.0:
        sc = sample.viscosity / (sample.density * sample.diffusivity)
        sh = sherwood(re, sc)
        beta = sh * sample.diffusivity / d
    else:
        sh = np.full_like(re, 2.0)
        beta = np.zeros_like(re)

    phase_slip = sample.phase_velocity - v_p[:, None, :]
    phase_speed = np.linalg.norm(phase_slip, axis=-1)
    drag = np.zeros_like(phase_speed)
    for k in range(len(sample.phase_names)):
        frac = sample.phase_fractions[:, k]
        rho = sample.phase_density[:, k]
        mu = sample.phase_viscosity[k]
        if drag_model == "single-sphere":
            re_k = rho * phase_speed[:, k] * d / mu
            cd = sphere_drag_coefficient(re_k)
            # 0.5 rho Cd A |u| written as (cd re / 24) 3 pi mu d to stay finite at zero slip
            drag[:, k] = cd * np.maximum(re_k, 1e-12) / 24.0 * 3.0 * math.pi * mu * d * (frac / np.maximum(sample.porosity, 1e-12))
        else:
            drag[:, k] = particle_drag_coefficient(frac, sample.porosity, rho, mu, d, phase_speed[:, k])
    force = (drag[..., None] * phase_slip).sum(axis=1)
    return TransferCoefficients(alpha, beta, re, nu, sh, drag, force)


# -- scatter ------------------------------------------------------------------------------


@dataclass
class ParticleExchange:
    """What every particle hands to the fluid during one step, as rates"""

    mass_rate: Dict[str, np.ndarray]  # species -> kg/s per particle
    energy_rate: np.ndarray  # W per particle, into the carrier
    drag: np.ndarray  # (n, phases) N s/m
    force_on_fluid: np.ndarray  # (n, phases, 3) N

    @classmethod
    def empty(cls, count: int, phases: int) -> "ParticleExchange":
        return cls({}, np.zeros(count), np.zeros((count, phases)), np.zeros((count, phases, 3)))


def species_phase_map(solver: MultiFluidSolver) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for spec in solver.specs:
        for name in spec.composition:
            out.setdefault(name, spec.name)
    return out


def scatter_sources(
    exchange: ParticleExchange,
    weights: PartitionWeights,
    grid: StructuredGrid,
    phase_names: Sequence[str],
    species_phase: Dict[str, str],
    carrier: str,
) -> CouplingSources:
    """Distribute particle releases over the cells they overlap, with the porosity weights"""
    volume = grid.cell_volume
    shape = grid.shape
    sources = CouplingSources()
    unknown = [s for s in exchange.mass_rate if s not in species_phase]
    if unknown:
        raise ConfigurationError(
            f"released species not carried by any fluid phase: {', '.join(sorted(unknown))}; "
            f"carried species: {', '.join(sorted(species_phase))}"
        )
    for name, rate in exchange.mass_rate.items():
        phase = species_phase[name]
        sources.mass.setdefault(phase, {})[name] = weights.scatter(rate).reshape(shape) / volume
    sources.energy[carrier] = weights.scatter(exchange.energy_rate).reshape(shape) / volume
    for k, phase in enumerate(phase_names):
        sources.drag[phase] = weights.scatter(exchange.drag[:, k]).reshape(shape) / volume
        sources.momentum[phase] = weights.scatter(exchange.force_on_fluid[:, k]).reshape(shape + (3,)) / volume
    return sources


# -- audit ---------------------------------------------------------------------------------


@dataclass
class AuditRecord:
    step: int
    time: float
    phase_mass: Dict[str, float]
    particle_mass: float
    total_mass: float
    total_energy: float
    mass_drift: float
    energy_drift: float
    courant: float


class ConservationAudit:
    """Total mass and energy per step, with drift net of what left through the boundaries"""

    def __init__(self, phase_names: Sequence[str]):
        self.phase_names = list(phase_names)
        self.records: List[AuditRecord] = []
        self._mass0: Optional[float] = None
        self._energy0: Optional[float] = None
        self._mass_out = 0.0
        self._energy_out = 0.0

    def record(self, step: int, state: "CoupledState", grid: StructuredGrid,
               report: Optional[FluidStepReport] = None) -> AuditRecord:
        volume = grid.cell_volume
        phase_mass = {p.name: float(p.mass(volume).sum()) for p in state.fluid.phases}
        fluid_energy = float(sum((p.mass(volume) * p.enthalpy).sum() for p in state.fluid.phases))
        particle_mass = float(sum(s.total_mass for s in state.interiors if s is not None))
        particle_energy = float(sum(s.total_energy for s in state.interiors if s is not None))
        total_mass = sum(phase_mass.values()) + particle_mass
        total_energy = fluid_energy + particle_energy
        if report is not None:
            self._mass_out += sum(report.boundary_mass.values())
            self._energy_out += report.boundary_energy
        if self._mass0 is None:
            self._mass0, self._energy0 = total_mass, total_energy
        mass_drift = (total_mass + self._mass_out - self._mass0) / max(abs(self._mass0), 1e-300)
        energy_drift = (total_energy + self._energy_out - self._energy0) / max(abs(self._energy0), 1e-300)
        rec = AuditRecord(step, state.time, phase_mass, particle_mass, total_mass, total_energy,
                          mass_drift, energy_drift, report.courant if report else 0.0)
        self.records.append(rec)
        return rec

    def max_drift(self) -> Tuple[float, float]:
        if not self.records:
            return 0.0, 0.0
        return (max(abs(r.mass_drift) for r in self.records), max(abs(r.energy_drift) for r in self.records))

    def write_csv(self, path: Path) -> None:
        header = ["step", "time"] + [f"mass_{p}" for p in self.phase_names] + [
            "particle_mass", "total_mass", "total_energy", "mass_drift", "energy_drift", "courant"]
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for r in self.records:
                writer.writerow([r.step, repr(r.time)] + [repr(r.phase_mass.get(p, 0.0)) for p in self.phase_names]
                                + [repr(r.particle_mass), repr(r.total_mass), repr(r.total_energy),
                                   repr(r.mass_drift), repr(r.energy_drift), repr(r.courant)])


# -- engine --------------------------------------------------------------------------------


@dataclass
class CouplingSettings:
    threads: int = 1
    reaction_substeps: int = 4
    cutoff_factor: float = 1.5
    drag_model: DragModel = "ergun-wen-yu"
    subgrid: Literal["off", "prescribed", "smagorinsky"] = "off"
    subgrid_k: float = 0.0
    porosity_samples: int = 10_000
    seed: int = 12345
    gravity: Tuple[float, float, float] = (0.0, 0.0, -9.81)


@dataclass
class ParticleProperties:
    """Per-particle constants the engine needs beyond the interiors"""

    conductivity: np.ndarray
    emissivity: np.ndarray
    mechanisms: List[Optional[ReactionMechanism]]
    thermal: np.ndarray  # bool, interiors resolved

    def select(self, keep: np.ndarray) -> "ParticleProperties":
        return ParticleProperties(
            self.conductivity[keep],
            self.emissivity[keep],
            [m for m, k in zip(self.mechanisms, keep) if k],
            self.thermal[keep],
        )


@dataclass
class CoupledState:
    time: float
    rigid: RigidState
    interiors: List[Optional[InteriorState]]
    fluid: PhaseField
    ids: np.ndarray
    properties: ParticleProperties
    step: int = 0
    reports: List[Optional[StepReport]] = field(default_factory=list)


class CouplingEngine:
    """
    Explicit staggered coupling: one fluid step per outer step, with the contact
    integration sub-stepped to resolve the contact duration.
    """

    def __init__(
        self,
        solver: MultiFluidSolver,
        contact: ContactModelParams,
        walls: Sequence[Wall] = (),
        settings: Optional[CouplingSettings] = None,
        carrier: Optional[str] = None,
        logger: Optional[logging.Logger] = None,
    ):
        self.solver = solver
        self.grid = solver.grid
        self.walls = list(walls)
        self.settings = settings or CouplingSettings()
        self.carrier = carrier or solver.specs[-1].name
        self.logger = logger or logging.getLogger("thermodem.coupling")
        if self.carrier not in [s.name for s in solver.specs]:
            raise ConfigurationError(f"carrier phase '{self.carrier}' is not a fluid phase")
        self.contact_model = ContactModel(contact, logger=self.logger)
        self.phase_names = [s.name for s in solver.specs]
        self.species_phase = species_phase_map(solver)
        self.mapper = PorosityMapper(self.grid, self.settings.porosity_samples, self.settings.seed, logger=self.logger)
        self.rng = np.random.default_rng(self.settings.seed)
        self.audit = ConservationAudit(self.phase_names)
        self.melted_mass = 0.0
        self._executor: Optional[ThreadPoolExecutor] = None
        self._weights_cache: Optional[Tuple[np.ndarray, np.ndarray, PartitionWeights]] = None

    # -- lifecycle -----------------------------------------------------------

    def __enter__(self) -> "CouplingEngine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    @property
    def executor(self) -> ThreadPoolExecutor:
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=max(1, self.settings.threads), thread_name_prefix="thermodem")
        return self._executor

    # -- helpers ---------------------------------------------------------------

    def partition_weights(self, rigid: RigidState) -> PartitionWeights:
        cached = self._weights_cache
        if cached is not None and np.array_equal(cached[0], rigid.position) and np.array_equal(cached[1], rigid.radius):
            return cached[2]
        weights = self.mapper.weights(rigid.position, rigid.radius)
        self._weights_cache = (rigid.position.copy(), rigid.radius.copy(), weights)
        return weights

    def porosity(self, rigid: RigidState) -> Tuple[np.ndarray, PartitionWeights]:
        weights = self.partition_weights(rigid)
        volumes = 4.0 / 3.0 * math.pi * rigid.radius ** 3
        return compute_porosity(weights, volumes, self.grid), weights

    def initial_state(self, rigid: RigidState, interiors: Sequence[Optional[InteriorState]],
                      properties: ParticleProperties) -> CoupledState:
        if len(interiors) != rigid.count:
            raise ConfigurationError("one interior slot per particle is required")
        eps, _ = self.porosity(rigid) if rigid.count else (np.ones(self.grid.shape), None)
        fluid = self.solver.initial_field(eps)
        state = CoupledState(0.0, rigid, list(interiors), fluid, np.arange(rigid.count), properties)
        self._sync_rigid(state)
        self.audit.record(0, state, self.grid)
        return state

    def _sync_rigid(self, state: CoupledState) -> None:
        if not state.interiors or all(s is None for s in state.interiors):
            return
        radius = state.rigid.radius.copy()
        mass = state.rigid.mass.copy()
        for k, s in enumerate(state.interiors):
            if s is not None and not s.consumed:
                radius[k] = s.mesh.radius
                mass[k] = s.total_mass
        state.rigid.update_spheres(radius, mass)

    def _subgrid(self, fluid: PhaseField) -> Optional[SubgridState]:
        mode = self.settings.subgrid
        if mode == "off":
            return None
        if mode == "prescribed":
            return SubgridState(np.full(self.grid.shape, self.settings.subgrid_k), float(np.cbrt(self.grid.cell_volume)))
        return smagorinsky_k(self.grid, fluid.phase(self.carrier).cell_velocity())

    def _boundary_conditions(self, state: CoupledState, sample: LocalFluidSample,
                             coeffs: TransferCoefficients) -> List[Optional[ParticleBoundaryCondition]]:
        rigid = state.rigid
        props = state.properties
        surface_t = np.array([
            s.surface_temperature if s is not None else sample.temperature[k]
            for k, s in enumerate(state.interiors)
        ])
        q_cond = np.zeros(rigid.count)
        q_rad = np.zeros(rigid.count)
        if rigid.count > 1 and np.any(props.thermal):
            contacts = detect_contacts(rigid, (), self.settings.cutoff_factor)
            pairs = contacts.neighbors
            both = props.thermal[pairs[:, 0]] & props.thermal[pairs[:, 1]] if pairs.size else np.zeros(0, dtype=bool)
            if np.any(both):
                heat = inter_particle_heat(rigid, surface_t, props.conductivity, pairs[both],
                                           contacts.neighbor_distance[both], props.emissivity)
                q_cond, q_rad = heat.q_cond, heat.q_rad
        out: List[Optional[ParticleBoundaryCondition]] = []
        for k, s in enumerate(state.interiors):
            if s is None:
                out.append(None)
                continue
            gas = s.species.gas_names
            out.append(ParticleBoundaryCondition(
                t_inf=float(sample.temperature[k]),
                alpha=float(coeffs.alpha[k]),
                rho_inf={n: float(sample.partial_density[n][k]) for n in gas if n in sample.partial_density},
                beta={n: float(coeffs.beta[k]) for n in gas if n in sample.partial_density},
                q_rad=float(q_rad[k]),
                q_cond=float(q_cond[k]),
            ))
        return out

    def _step_interiors(self, state: CoupledState, bcs, dt: float) -> Tuple[List, List]:
        substeps = self.settings.reaction_substeps

        def work(k):
            s = state.interiors[k]
            if s is None:
                return None, None
            return step_interior(s, bcs[k], state.properties.mechanisms[k], dt, substeps)

        results = list(self.executor.map(work, range(len(state.interiors))))
        return [r[0] for r in results], [r[1] for r in results]

    def _move(self, rigid: RigidState, external: np.ndarray, dt: float) -> RigidState:
        if rigid.count == 0 or np.all(rigid.fixed):
            return rigid
        free = ~rigid.fixed
        h = contact_substep(self.contact_model.params, float(rigid.mass[free].min()), float(rigid.radius[free].min()))
        substeps = max(1, int(math.ceil(dt / h))) if math.isfinite(h) else 1
        h = dt / substeps
        walls = self.walls
        cutoff = self.settings.cutoff_factor
        model = self.contact_model

        def force(s: RigidState):
            contacts = detect_contacts(s, walls, cutoff)
            f = model.evaluate(s, contacts, h)
            return f.force + external, f.torque

        integrator = MotionIntegrator(force, logger=self.logger)
        for _ in range(substeps):
            rigid = integrator.step(rigid, h)
        return rigid

    # -- outer step --------------------------------------------------------------

    def advance(self, state: CoupledState, dt: float) -> CoupledState:
        if dt <= 0.0:
            raise ConfigurationError(f"dt must be positive, got {dt}")
        grid = self.grid
        rigid = state.rigid
        n = rigid.count
        nphase = len(self.phase_names)

        if n:
            sample = gather_local_fluid(grid, state.fluid, rigid.position, self.carrier, self._subgrid(state.fluid),
                                        self.settings.subgrid != "off", self.rng, state.ids)
            coeffs = transfer_coefficients(2.0 * rigid.radius, sample, rigid.velocity, self.settings.drag_model)
            bcs = self._boundary_conditions(state, sample, coeffs)
            interiors, reports = self._step_interiors(state, bcs, dt)
            self.melted_mass += sum(r.melt_mass for r in reports if r is not None)
        else:
            interiors, reports = [], []

        exchange = ParticleExchange.empty(n, nphase)
        if n:
            exchange.drag = coeffs.drag
            slip = sample.phase_velocity - rigid.velocity[:, None, :]
            exchange.force_on_fluid = -coeffs.drag[..., None] * slip
            for k, report in enumerate(reports):
                if report is None:
                    continue
                for name, m in report.released_mass.items():
                    if m != 0.0:
                        exchange.mass_rate.setdefault(name, np.zeros(n))[k] = m / dt
                exchange.energy_rate[k] = report.released_energy / dt

            volume_p = 4.0 / 3.0 * math.pi * rigid.radius ** 3
            gravity = np.asarray(self.settings.gravity)
            external = rigid.mass[:, None] * gravity + coeffs.drag_force - volume_p[:, None] * sample.pressure_gradient
            moved = self._move(rigid.copy(), external, dt)
        else:
            moved = rigid

        new = CoupledState(state.time, moved, interiors, state.fluid, state.ids, state.properties,
                           state.step, reports)
        self._sync_rigid(new)
        eps, weights = self.porosity(new.rigid) if n else (np.ones(grid.shape), None)
        if n:
            sources = scatter_sources(exchange, weights, grid, self.phase_names, self.species_phase, self.carrier)
        else:
            sources = CouplingSources()
        new.fluid, fluid_report = self.solver.step(state.fluid, eps, sources, dt)
        new.time = state.time + dt
        new.step = state.step + 1
        self.audit.record(new.step, new, grid, fluid_report)
        return self._drop_consumed(new)

    def _drop_consumed(self, state: CoupledState) -> CoupledState:
        keep = np.array([s is None or not s.consumed for s in state.interiors], dtype=bool)
        if keep.size == 0 or np.all(keep):
            return state
        for pid in state.ids[~keep]:
            self.logger.info(f"Particle {int(pid)} consumed at t={state.time:.4f} s")
        r = state.rigid
        state.rigid = RigidState(r.position[keep], r.velocity[keep], r.angular_velocity[keep], r.mass[keep],
                                 r.inertia[keep], r.radius[keep], r.fixed[keep])
        state.interiors = [s for s, k in zip(state.interiors, keep) if k]
        state.reports = [s for s, k in zip(state.reports, keep) if k]
        state.ids = state.ids[keep]
        state.properties = state.properties.select(keep)
        self.contact_model.history.clear()
        return state

    def run(self, state: CoupledState, t_end: float, dt: float, callback=None) -> CoupledState:
        steps = int(round(t_end / dt))
        for _ in range(steps):
            state = self.advance(state, dt)
            if callback is not None:
                callback(state)
        return state
