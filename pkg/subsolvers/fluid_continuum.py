"""
Structured-grid finite-volume multi-fluid solver.

Cell-centred scalars, per-phase interstitial velocities on cell faces, one
shared pressure. The last phase closes the volume balance: its fraction is the
porosity minus all other phases, and its density floats and is relaxed back to
the reference through the pressure projection.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .errors import ConfigurationError, StepError
from .properties import PropertyDatabase, Species, mixture_enthalpy, temperature_from_enthalpy

logger = logging.getLogger("thermodem.fluid")

FACES = ("x-", "x+", "y-", "y+", "z-", "z+")
BoundaryKind = Literal["wall", "periodic", "inlet", "outlet"]


@dataclass
class BoundarySpec:
    kind: BoundaryKind = "wall"
    inflow: Dict[str, float] = field(default_factory=dict)  # phase -> superficial velocity into the domain
    temperature: Optional[float] = None
    composition: Dict[str, Dict[str, float]] = field(default_factory=dict)
    pressure: float = 0.0


@dataclass
class StructuredGrid:
    origin: np.ndarray
    counts: Tuple[int, int, int]
    spacing: np.ndarray
    boundaries: Dict[str, BoundarySpec] = field(default_factory=dict)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.spacing = np.asarray(self.spacing, dtype=float)
        self.counts = tuple(int(c) for c in self.counts)
        violations = []
        if len(self.counts) != 3 or any(c < 1 for c in self.counts):
            violations.append(f"cell counts must be three integers >= 1, got {self.counts}")
        if self.spacing.shape != (3,) or np.any(self.spacing <= 0.0):
            violations.append(f"cell spacing must be three positive lengths, got {self.spacing}")
        for name in FACES:
            self.boundaries.setdefault(name, BoundarySpec())
        unknown = set(self.boundaries) - set(FACES)
        if unknown:
            violations.append(f"unknown boundary faces: {', '.join(sorted(unknown))}")
        for axis in range(3):
            lo, hi = self.boundaries[FACES[2 * axis]], self.boundaries[FACES[2 * axis + 1]]
            if (lo.kind == "periodic") != (hi.kind == "periodic"):
                violations.append(f"periodic boundaries must be paired on axis {'xyz'[axis]}")
        if violations:
            raise ConfigurationError(violations, source="grid")

    @classmethod
    def box(cls, lo, hi, counts, boundaries=None) -> "StructuredGrid":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        counts = tuple(int(c) for c in counts)
        return cls(lo, counts, (hi - lo) / np.asarray(counts), dict(boundaries or {}))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.counts

    @property
    def cell_count(self) -> int:
        return int(np.prod(self.counts))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * np.asarray(self.counts)

    def face_area(self, axis: int) -> float:
        others = [a for a in range(3) if a != axis]
        return float(self.spacing[others[0]] * self.spacing[others[1]])

    def periodic(self, axis: int) -> bool:
        return self.boundaries[FACES[2 * axis]].kind == "periodic"

    def boundary(self, axis: int, side: int) -> BoundarySpec:
        return self.boundaries[FACES[2 * axis + side]]

    def axis_centres(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.counts[axis]) + 0.5) * self.spacing[axis]

    def cell_centres(self) -> np.ndarray:
        x, y, z = np.meshgrid(*(self.axis_centres(a) for a in range(3)), indexing="ij")
        return np.stack([x, y, z], axis=-1)

    def face_shape(self, axis: int) -> Tuple[int, ...]:
        s = list(self.counts)
        s[axis] += 1
        return tuple(s)

    def zero_faces(self) -> List[np.ndarray]:
        return [np.zeros(self.face_shape(a)) for a in range(3)]

    def locate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Integer cell index of each point and whether it lies inside the domain"""
        rel = (np.atleast_2d(points) - self.origin) / self.spacing
        idx = np.floor(rel).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.counts)), axis=1)
        return np.clip(idx, 0, np.asarray(self.counts) - 1), inside

    def flat_index(self, idx: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(idx).T), self.counts)


# -- face helpers -----------------------------------------------------------------


def _front(a: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(a, axis, 0)


def _back(a: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(a, 0, axis)


def _face_mean(cell: np.ndarray, axis: int, periodic: bool) -> np.ndarray:
    c = _front(cell, axis)
    f = np.empty((c.shape[0] + 1,) + c.shape[1:])
    f[1:-1] = 0.5 * (c[:-1] + c[1:])
    if periodic:
        f[0] = f[-1] = 0.5 * (c[0] + c[-1])
    else:
        f[0], f[-1] = c[0], c[-1]
    return _back(f, axis)


def _face_upwind(cell: np.ndarray, flow: np.ndarray, axis: int, periodic: bool,
                 low: Optional[np.ndarray] = None, high: Optional[np.ndarray] = None) -> np.ndarray:
    """Upwind cell value on every face; low/high are inflow values beyond the boundaries"""
    c = _front(cell, axis)
    u = _front(flow, axis)
    left = np.empty((c.shape[0] + 1,) + c.shape[1:])
    right = np.empty_like(left)
    left[1:] = c
    right[:-1] = c
    if periodic:
        left[0] = c[-1]
        right[-1] = c[0]
    else:
        left[0] = c[0] if low is None else low
        right[-1] = c[-1] if high is None else high
    extra = (None,) * (left.ndim - u.ndim)
    positive = (u > 0.0)[(Ellipsis,) + extra]
    return _back(np.where(positive, left, right), axis)


def _divergence(fluxes: Sequence[np.ndarray]) -> np.ndarray:
    """Net outflow per cell from per-axis face fluxes (positive along +axis)"""
    return sum(np.diff(f, axis=a) for a, f in enumerate(fluxes))


def _boundary_outflow(fluxes: Sequence[np.ndarray], grid: StructuredGrid) -> float:
    total = 0.0
    for axis, f in enumerate(fluxes):
        if grid.periodic(axis):
            continue
        fa = _front(f, axis)
        total += float(fa[-1].sum() - fa[0].sum())
    return total


def _diffusive_flux(g: np.ndarray, gamma: np.ndarray, grid: StructuredGrid, axis: int) -> np.ndarray:
    """-Gamma dg/dx A on faces; zero across non-periodic boundaries"""
    periodic = grid.periodic(axis)
    gf = _front(_face_mean(gamma, axis, periodic), axis)
    c = _front(g, axis)
    f = np.zeros((c.shape[0] + 1,) + c.shape[1:])
    area = grid.face_area(axis)
    dx = grid.spacing[axis]
    f[1:-1] = -gf[1:-1] * area * (c[1:] - c[:-1]) / dx
    if periodic:
        f[0] = f[-1] = -gf[0] * area * (c[0] - c[-1]) / dx
    return _back(f, axis)


@dataclass
class TransportResult:
    phi: np.ndarray
    conserved: np.ndarray  # eps rho phi per cell
    boundary_outflow: float  # integrated over dt
    courant: float
    diffusion_number: float


def courant_number(grid: StructuredGrid, face_velocity: Sequence[np.ndarray], dt: float) -> float:
    total = np.zeros(grid.shape)
    for axis, u in enumerate(face_velocity):
        ua = _front(np.abs(u), axis)
        total = total + _back(np.maximum(ua[:-1], ua[1:]), axis) * dt / grid.spacing[axis]
    return float(total.max())


def solve_transport(
    grid: StructuredGrid,
    phi: np.ndarray,
    face_velocity: Sequence[np.ndarray],
    gamma,
    source,
    dt: float,
    eps=1.0,
    rho=1.0,
    eps_rho_new: Optional[np.ndarray] = None,
    inflow_values: Optional[Dict[str, float]] = None,
    cfl_limit: float = 0.9,
) -> TransportResult:
    """
    Explicit conservative update of d(eps rho phi)/dt + div(eps rho v phi) = div(Gamma grad(eps phi)) + S.

    Advection is first-order upwind on the conserved quantity, diffusion is
    central. face_velocity holds one array per axis with one more entry along
    that axis than cells. inflow_values gives eps rho phi beyond a boundary face.
    """
    if dt <= 0.0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    shape = grid.shape
    eps = np.broadcast_to(np.asarray(eps, dtype=float), shape)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), shape)
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), shape)
    source = np.broadcast_to(np.asarray(source, dtype=float), shape)

    courant = courant_number(grid, face_velocity, dt)
    diffusivity = float(np.max(gamma / rho))
    diffusion_number = diffusivity * dt * float(np.sum(1.0 / grid.spacing ** 2))
    if courant > cfl_limit:
        raise StepError(f"Courant number {courant:.3f} exceeds limit {cfl_limit}", module="fluid", field="courant")
    if diffusion_number > 0.5:
        raise StepError(f"diffusion number {diffusion_number:.3f} exceeds 0.5", module="fluid", field="diffusion")

    inflow_values = inflow_values or {}
    q = eps * rho * phi
    g = eps * phi
    fluxes = []
    mass_fluxes = []
    for axis in range(3):
        periodic = grid.periodic(axis)
        low = inflow_values.get(FACES[2 * axis])
        high = inflow_values.get(FACES[2 * axis + 1])
        u = face_velocity[axis]
        area = grid.face_area(axis)
        adv = u * area * _face_upwind(q, u, axis, periodic, low, high)
        fluxes.append(adv + _diffusive_flux(g, gamma, grid, axis))
        mass_fluxes.append(u * area * _face_upwind(eps * rho, u, axis, periodic))
    volume = grid.cell_volume
    q_new = q + dt * (source - _divergence(fluxes) / volume)
    if eps_rho_new is None:
        eps_rho_new = eps * rho - dt * _divergence(mass_fluxes) / volume
    with np.errstate(divide="ignore", invalid="ignore"):
        phi_new = np.where(eps_rho_new > 0.0, q_new / eps_rho_new, phi)
    return TransportResult(phi_new, q_new, dt * _boundary_outflow(fluxes, grid), courant, diffusion_number)


# -- phases -----------------------------------------------------------------------


@dataclass
class PhaseSpec:
    name: str
    composition: Dict[str, float]
    density: float
    viscosity: float
    conductivity: float
    temperature: float
    fraction: float = 0.0
    diffusivity: float = 0.0


@dataclass
class Phase:
    spec: PhaseSpec
    species: List[Species]
    fraction: np.ndarray
    density: np.ndarray
    velocity: List[np.ndarray]
    face_fraction: List[np.ndarray]
    enthalpy: np.ndarray
    temperature: np.ndarray
    mass_fractions: np.ndarray

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def species_names(self) -> List[str]:
        return [s.name for s in self.species]

    def mass(self, volume: float) -> np.ndarray:
        return self.fraction * self.density * volume

    def cell_velocity(self) -> np.ndarray:
        comps = []
        for axis, v in enumerate(self.velocity):
            va = _front(v, axis)
            comps.append(_back(0.5 * (va[:-1] + va[1:]), axis))
        return np.stack(comps, axis=-1)

    def copy(self) -> "Phase":
        return Phase(
            self.spec,
            self.species,
            self.fraction.copy(),
            self.density.copy(),
            [v.copy() for v in self.velocity],
            [f.copy() for f in self.face_fraction],
            self.enthalpy.copy(),
            self.temperature.copy(),
            self.mass_fractions.copy(),
        )


@dataclass
class PhaseField:
    phases: List[Phase]
    pressure: np.ndarray
    porosity: np.ndarray
    time: float = 0.0

    def phase(self, name: str) -> Phase:
        for p in self.phases:
            if p.name == name:
                return p
        raise ConfigurationError(
            f"unknown phase '{name}'; available phases: {', '.join(p.name for p in self.phases)}"
        )

    def closure_error(self) -> float:
        total = sum(p.fraction for p in self.phases)
        return float(np.max(np.abs(total - self.porosity)))

    def copy(self) -> "PhaseField":
        return PhaseField([p.copy() for p in self.phases], self.pressure.copy(), self.porosity.copy(), self.time)


@dataclass
class CouplingSources:
    """Per-cell exchange terms from the particles, time-averaged over one step"""

    mass: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)  # phase -> species -> kg/(m3 s)
    energy: Dict[str, np.ndarray] = field(default_factory=dict)  # phase -> W/m3
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)  # phase -> N/m3, drag at the old velocity
    drag: Dict[str, np.ndarray] = field(default_factory=dict)  # phase -> K in N s/m4

    def phase_mass(self, phase: str, shape) -> np.ndarray:
        per_species = self.mass.get(phase, {})
        return sum(per_species.values(), np.zeros(shape))

    def total_mass_rate(self, volume: float) -> float:
        return float(sum(float(a.sum()) for d in self.mass.values() for a in d.values()) * volume)

    def total_energy_rate(self, volume: float) -> float:
        return float(sum(float(a.sum()) for a in self.energy.values()) * volume)


@dataclass
class SubgridState:
    k: np.ndarray
    filter_width: float


@dataclass
class FluidStepReport:
    courant: float = 0.0
    pressure_iterations: int = 0
    pressure_residual: float = 0.0
    boundary_mass: Dict[str, float] = field(default_factory=dict)  # kg leaving over dt
    boundary_energy: float = 0.0  # J leaving over dt
    inflow_mass: Dict[str, float] = field(default_factory=dict)


@dataclass
class SolverSettings:
    cfl_limit: float = 0.9
    pressure_tolerance: float = 1e-10
    pressure_max_iterations: int = 2000
    energy: bool = True


class MultiFluidSolver:
    """Sequential per-phase continuity, face momentum with shared-pressure projection, energy and species"""

    def __init__(
        self,
        grid: StructuredGrid,
        database: PropertyDatabase,
        phases: Sequence[PhaseSpec],
        gravity: Sequence[float] = (0.0, 0.0, -9.81),
        settings: Optional[SolverSettings] = None,
        logger: Optional[logging.Logger] = None,
    ):
        if not phases:
            raise ConfigurationError("at least one fluid phase is required")
        self.grid = grid
        self.database = database
        self.specs = list(phases)
        self.gravity = np.asarray(gravity, dtype=float)
        self.settings = settings or SolverSettings()
        self.logger = logger or logging.getLogger("thermodem.fluid")
        self.species = {s.name: database.resolve(list(s.composition)) for s in self.specs}
        self._check_boundaries()
        self._laplacian_cache = None

    def _check_boundaries(self) -> None:
        names = {s.name for s in self.specs}
        violations = []
        for face, bc in self.grid.boundaries.items():
            for phase in bc.inflow:
                if phase not in names:
                    violations.append(f"boundary {face}: unknown phase '{phase}'")
            if bc.inflow and bc.kind not in ("inlet", "outlet"):
                violations.append(f"boundary {face}: inflow requires an inlet or outlet")
        if violations:
            raise ConfigurationError(violations, source="fluid boundaries")

    @property
    def closure(self) -> PhaseSpec:
        return self.specs[-1]

    # -- initial state ---------------------------------------------------------

    def initial_field(self, porosity: Optional[np.ndarray] = None) -> PhaseField:
        shape = self.grid.shape
        eps = np.ones(shape) if porosity is None else np.asarray(porosity, dtype=float).copy()
        phases = []
        others = np.zeros(shape)
        for spec in self.specs[:-1]:
            frac = np.minimum(np.full(shape, spec.fraction), eps)
            others = others + frac
            phases.append(self._make_phase(spec, frac))
        closure = eps - others
        if np.any(closure <= 0.0):
            raise ConfigurationError(f"initial fractions leave no room for closure phase '{self.closure.name}'")
        phases.append(self._make_phase(self.closure, closure))
        p = np.zeros(shape)
        return PhaseField(phases, p, eps)

    def _make_phase(self, spec: PhaseSpec, fraction: np.ndarray) -> Phase:
        shape = self.grid.shape
        species = self.species[spec.name]
        y = np.array([spec.composition[s.name] for s in species])
        t = np.full(shape, spec.temperature)
        h = mixture_enthalpy(species, np.broadcast_to(y, (t.size, y.size)), t.ravel()).reshape(shape)
        return Phase(
            spec,
            species,
            fraction,
            np.full(shape, spec.density),
            self.grid.zero_faces(),
            self.grid.zero_faces(),
            h,
            t,
            np.broadcast_to(y, shape + (y.size,)).copy(),
        )

    def boundary_enthalpy(self, phase: Phase, bc: BoundarySpec) -> Tuple[float, np.ndarray]:
        comp = bc.composition.get(phase.name, phase.spec.composition)
        y = np.array([comp.get(s.name, 0.0) for s in phase.species])
        t = bc.temperature if bc.temperature is not None else phase.spec.temperature
        return float(mixture_enthalpy(phase.species, y[None, :], np.array([t]))[0]), y

    # -- step ------------------------------------------------------------------

    def step(
        self,
        state: PhaseField,
        porosity: np.ndarray,
        sources: Optional[CouplingSources],
        dt: float,
    ) -> Tuple[PhaseField, FluidStepReport]:
        if dt <= 0.0:
            raise ConfigurationError(f"dt must be positive, got {dt}")
        sources = sources or CouplingSources()
        grid = self.grid
        shape = grid.shape
        volume = grid.cell_volume
        new = state.copy()
        new.porosity = np.asarray(porosity, dtype=float).copy()
        report = FluidStepReport()

        predicted = [self._predict(state, phase, sources, dt) for phase in state.phases]
        pressure_correction = self._project(state, new.porosity, predicted, sources, dt, report)
        new.pressure = state.pressure + pressure_correction

        flows = []
        for phase, pred in zip(new.phases, predicted):
            velocity, face_fraction, volume_flux = self._correct(pred, pressure_correction)
            phase.velocity = velocity
            phase.face_fraction = face_fraction
            flows.append(volume_flux)
        report.courant = max(courant_number(grid, p.velocity, dt) for p in new.phases)
        if report.courant > self.settings.cfl_limit:
            raise StepError(
                f"Courant number {report.courant:.3f} exceeds limit {self.settings.cfl_limit}",
                module="fluid",
                field="courant",
            )

        # continuity
        mass_fluxes = []
        others = np.zeros(shape)
        for k, (old, phase, flow) in enumerate(zip(state.phases, new.phases, flows)):
            closure = k == len(new.phases) - 1
            rho_in = phase.spec.density
            face_rho = [
                _face_upwind(old.density, flow[a], a, grid.periodic(a),
                             rho_in if grid.boundary(a, 0).kind in ("inlet", "outlet") else None,
                             rho_in if grid.boundary(a, 1).kind in ("inlet", "outlet") else None)
                for a in range(3)
            ]
            mflux = [flow[a] * face_rho[a] for a in range(3)]
            mass_fluxes.append(mflux)
            m_src = sources.phase_mass(phase.name, shape)
            mass_old = old.mass(volume)
            mass_new = mass_old - dt * _divergence(mflux) + dt * m_src * volume
            report.boundary_mass[phase.name] = dt * _boundary_outflow(mflux, grid)
            if not closure:
                phase.fraction = mass_new / (phase.density * volume)
                others = others + phase.fraction
            else:
                phase.fraction = new.porosity - others
                if np.any(phase.fraction <= 0.0):
                    idx = int(np.argmin(phase.fraction))
                    raise StepError(f"closure phase '{phase.name}' vanished", module="fluid",
                                    field="fraction", index=idx)
                phase.density = mass_new / (phase.fraction * volume)
            if np.any(phase.fraction < -1e-8):
                raise StepError(f"negative volume fraction of '{phase.name}'", module="fluid",
                                field="fraction", index=int(np.argmin(phase.fraction)))
            phase.fraction = np.clip(phase.fraction, 0.0, None)

            self._transport_scalars(old, phase, mflux, mass_old, mass_new, sources, dt, report)

        new.time = state.time + dt
        return new, report

    def _transport_scalars(self, old: Phase, phase: Phase, mflux, mass_old, mass_new, sources, dt, report) -> None:
        grid = self.grid
        volume = grid.cell_volume
        shape = grid.shape
        inflow_h = {}
        inflow_y = {}
        for axis in range(3):
            for side in (0, 1):
                bc = grid.boundary(axis, side)
                if bc.kind in ("inlet", "outlet"):
                    h_in, y_in = self.boundary_enthalpy(phase, bc)
                    inflow_h[(axis, side)] = h_in
                    inflow_y[(axis, side)] = y_in

        def upwind(cell, axis, flux):
            low = inflow_h.get((axis, 0)) if cell.ndim == 3 else inflow_y.get((axis, 0))
            high = inflow_h.get((axis, 1)) if cell.ndim == 3 else inflow_y.get((axis, 1))
            return _face_upwind(cell, flux, axis, grid.periodic(axis), low, high)

        filled = mass_new > 0.0
        if self.settings.energy:
            e_flux = []
            for axis in range(3):
                adv = mflux[axis] * upwind(old.enthalpy, axis, mflux[axis])
                eps_face = _face_mean(old.fraction, axis, grid.periodic(axis))
                cond = _diffusive_flux(old.temperature, phase.spec.conductivity * np.ones(shape), grid, axis)
                cond = cond * eps_face
                e_flux.append(adv + cond)
            q = mass_old * old.enthalpy - dt * _divergence(e_flux)
            q = q + dt * sources.energy.get(phase.name, np.zeros(shape)) * volume
            report.boundary_energy += dt * _boundary_outflow(e_flux, grid)
            with np.errstate(divide="ignore", invalid="ignore"):
                phase.enthalpy = np.where(filled, q / mass_new, old.enthalpy)

        if len(phase.species) > 1 or sources.mass.get(phase.name):
            y_flux = [mflux[a][..., None] * upwind(old.mass_fractions, a, mflux[a]) for a in range(3)]
            qy = mass_old[..., None] * old.mass_fractions - dt * _divergence(y_flux)
            for i, name in enumerate(phase.species_names):
                src = sources.mass.get(phase.name, {}).get(name)
                if src is not None:
                    qy[..., i] += dt * src * volume
            unknown = set(sources.mass.get(phase.name, {})) - set(phase.species_names)
            if unknown:
                raise ConfigurationError(
                    f"phase '{phase.name}' receives species it does not carry: {', '.join(sorted(unknown))}"
                )
            with np.errstate(divide="ignore", invalid="ignore"):
                phase.mass_fractions = np.where(filled[..., None], qy / mass_new[..., None], old.mass_fractions)
            phase.mass_fractions = np.clip(phase.mass_fractions, 0.0, None)

        if self.settings.energy and np.any(filled):
            idx = filled.ravel()
            y = phase.mass_fractions.reshape(-1, len(phase.species))[idx]
            t = temperature_from_enthalpy(phase.species, y, phase.enthalpy.ravel()[idx], old.temperature.ravel()[idx])
            temp = old.temperature.ravel().copy()
            temp[idx] = t
            phase.temperature = temp.reshape(shape)

    # -- momentum ----------------------------------------------------------------

    def _predict(self, state: PhaseField, phase: Phase, sources: CouplingSources, dt: float) -> dict:
        """Face velocities without the pressure correction, plus the coefficients the projection needs"""
        grid = self.grid
        shape = grid.shape
        drag = sources.drag.get(phase.name, np.zeros(shape))
        extra = sources.momentum.get(phase.name, np.zeros(shape + (3,)))
        tendency = self._momentum_tendency(phase)
        out = {"phase": phase, "v": [], "eps": [], "coef": [], "fixed": [], "dx": []}
        for axis in range(3):
            periodic = grid.periodic(axis)
            rho_f = _face_mean(phase.density, axis, periodic)
            k_f = _face_mean(drag, axis, periodic)
            s_f = _face_mean(extra[..., axis] + tendency[..., axis], axis, periodic)
            v_old = phase.velocity[axis]
            eps_f = _face_upwind(phase.fraction, v_old, axis, periodic)
            grad, dx = self._pressure_gradient(state.pressure, axis)
            a = np.maximum(eps_f * rho_f / dt + k_f, 1e-30)
            v = (eps_f * rho_f * v_old / dt + eps_f * rho_f * self.gravity[axis] + k_f * v_old + s_f
                 - eps_f * grad) / a
            eps_f = _face_upwind(phase.fraction, v, axis, periodic)
            a = np.maximum(eps_f * rho_f / dt + k_f, 1e-30)
            fixed = np.zeros(v.shape, dtype=bool)
            fa, va, ea = _front(fixed, axis), _front(v, axis), _front(eps_f, axis)
            for side, index in ((0, 0), (1, -1)):
                bc = grid.boundary(axis, side)
                inward = 1.0 if side == 0 else -1.0
                if bc.kind == "wall":
                    fa[index] = True
                    va[index] = 0.0
                elif bc.kind in ("inlet", "outlet") and phase.name in bc.inflow:
                    fa[index] = True
                    superficial = inward * bc.inflow[phase.name]
                    ea[index] = 1.0
                    va[index] = superficial
                elif bc.kind == "inlet":
                    # free drainage: outflow only, not corrected
                    fa[index] = True
                    va[index] = np.where(inward * va[index] < 0.0, va[index], 0.0)
            out["v"].append(v)
            out["eps"].append(eps_f)
            out["coef"].append(a)
            out["fixed"].append(fixed)
            out["dx"].append(dx)
        return out

    def _pressure_gradient(self, p: np.ndarray, axis: int) -> Tuple[np.ndarray, np.ndarray]:
        grid = self.grid
        pa = _front(p, axis)
        dx = grid.spacing[axis]
        g = np.zeros((pa.shape[0] + 1,) + pa.shape[1:])
        d = np.full(g.shape, dx)
        g[1:-1] = (pa[1:] - pa[:-1]) / dx
        if grid.periodic(axis):
            g[0] = g[-1] = (pa[0] - pa[-1]) / dx
        else:
            lo, hi = grid.boundary(axis, 0), grid.boundary(axis, 1)
            if lo.kind == "outlet":
                g[0] = (pa[0] - lo.pressure) / (0.5 * dx)
                d[0] = 0.5 * dx
            if hi.kind == "outlet":
                g[-1] = (hi.pressure - pa[-1]) / (0.5 * dx)
                d[-1] = 0.5 * dx
        return _back(g, axis), _back(d, axis)

    def _momentum_tendency(self, phase: Phase) -> np.ndarray:
        """Explicit advection and viscous diffusion of eps rho u, per unit volume"""
        grid = self.grid
        u = phase.cell_velocity()
        q = phase.fraction[..., None] * phase.density[..., None] * u
        out = np.zeros_like(q)
        mu = phase.spec.viscosity * phase.fraction
        for comp in range(3):
            fluxes = []
            for axis in range(3):
                flow = phase.face_fraction[axis] * phase.velocity[axis] * grid.face_area(axis)
                adv = flow * _face_upwind(phase.density * u[..., comp], flow, axis, grid.periodic(axis))
                visc = _diffusive_flux(u[..., comp], mu, grid, axis)
                fluxes.append(adv + visc)
            out[..., comp] = -_divergence(fluxes) / grid.cell_volume
        return out

    # -- projection ------------------------------------------------------------

    def _project(self, state: PhaseField, porosity_new, predicted, sources, dt, report) -> np.ndarray:
        grid = self.grid
        shape = grid.shape
        n = grid.cell_count
        volume = grid.cell_volume
        index = np.arange(n).reshape(shape)

        target = -(porosity_new - state.porosity) / dt
        for spec, phase in zip(self.specs, state.phases):
            target = target + sources.phase_mass(spec.name, shape) / spec.density
        closure = state.phases[-1]
        target = target + closure.fraction / dt * (closure.density / self.closure.density - 1.0)

        rhs = target * volume
        rows, cols, vals = [], [], []
        diag = np.zeros(shape)
        dirichlet = False
        for axis in range(3):
            area = grid.face_area(axis)
            coef = np.zeros(grid.face_shape(axis))
            star = np.zeros(grid.face_shape(axis))
            for pred in predicted:
                free = ~pred["fixed"][axis]
                eps_f = pred["eps"][axis]
                coef = coef + np.where(free, eps_f ** 2 / pred["coef"][axis], 0.0) * area / pred["dx"][axis]
                star = star + eps_f * pred["v"][axis] * area
            rhs = rhs - np.diff(star, axis=axis)
            ca = _front(coef, axis)
            ia = _front(index, axis)
            da = _front(diag, axis)
            inner = ca[1:-1]
            da[:-1] += inner
            da[1:] += inner
            rows += [ia[:-1].ravel(), ia[1:].ravel()]
            cols += [ia[1:].ravel(), ia[:-1].ravel()]
            vals += [-inner.ravel(), -inner.ravel()]
            if grid.periodic(axis):
                da[0] += ca[0]
                da[-1] += ca[0]
                rows += [ia[0].ravel(), ia[-1].ravel()]
                cols += [ia[-1].ravel(), ia[0].ravel()]
                vals += [-ca[0].ravel(), -ca[0].ravel()]
            else:
                for side, face in ((0, 0), (1, -1)):
                    if grid.boundary(axis, side).kind == "outlet":
                        da[face] += ca[face]
                        dirichlet = dirichlet or bool(np.any(ca[face] > 0.0))
        rows.append(index.ravel())
        cols.append(index.ravel())
        vals.append(diag.ravel())
        matrix = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )
        b = rhs.ravel()
        if not dirichlet:
            b = b - b.mean()
        if not np.any(b):
            return np.zeros(shape)
        active = matrix.diagonal() > 0.0
        x = np.zeros(n)
        if not np.all(active):
            # cells cut off from every free face keep their pressure
            matrix = matrix[active][:, active]
            b = b[active]
        scale = float(np.linalg.norm(b))
        iterations = [0]

        def count(_):
            iterations[0] += 1

        sol, info = cg(matrix, b, rtol=self.settings.pressure_tolerance, atol=0.0,
                       maxiter=self.settings.pressure_max_iterations, callback=count)
        residual = float(np.linalg.norm(matrix @ sol - b)) / scale
        report.pressure_iterations = iterations[0]
        report.pressure_residual = residual
        if info != 0 and residual > 1e3 * self.settings.pressure_tolerance:
            raise StepError(
                f"pressure solve did not converge after {iterations[0]} iterations, residual {residual:.3e}",
                module="fluid",
                field="pressure",
            )
        x[active] = sol
        if not dirichlet:
            x[active] -= x[active].mean()
        return x.reshape(shape)

    def _correct(self, pred: dict, p_corr: np.ndarray):
        grid = self.grid
        velocity, fractions, flows = [], [], []
        for axis in range(3):
            v = pred["v"][axis].copy()
            eps_f = pred["eps"][axis]
            pa = _front(p_corr, axis)
            grad = np.zeros((pa.shape[0] + 1,) + pa.shape[1:])
            dx = grid.spacing[axis]
            grad[1:-1] = (pa[1:] - pa[:-1]) / dx
            if grid.periodic(axis):
                grad[0] = grad[-1] = (pa[0] - pa[-1]) / dx
            else:
                if grid.boundary(axis, 0).kind == "outlet":
                    grad[0] = pa[0] / (0.5 * dx)
                if grid.boundary(axis, 1).kind == "outlet":
                    grad[-1] = -pa[-1] / (0.5 * dx)
            grad = _back(grad, axis)
            free = ~pred["fixed"][axis]
            v = np.where(free, v - eps_f / pred["coef"][axis] * grad, v)
            flow = eps_f * v * grid.face_area(axis)
            with np.errstate(divide="ignore", invalid="ignore"):
                interstitial = np.where(eps_f > 0.0, flow / (np.maximum(eps_f, 1e-300) * grid.face_area(axis)), 0.0)
            velocity.append(interstitial)
            fractions.append(eps_f)
            flows.append(flow)
        return velocity, fractions, flows


# -- porosity -----------------------------------------------------------------------


@dataclass
class PartitionWeights:
    """Sparse particle-to-cell volume shares in coordinate form"""

    particle: np.ndarray
    cell: np.ndarray
    weight: np.ndarray
    particle_count: int
    cell_count: int
    clipped: int = 0

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Distribute per-particle values to cells; returns flat per-cell totals"""
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            return np.bincount(self.cell, weights=self.weight * values[self.particle], minlength=self.cell_count)
        cols = [
            np.bincount(self.cell, weights=self.weight * values[self.particle, c], minlength=self.cell_count)
            for c in range(values.shape[1])
        ]
        return np.stack(cols, axis=-1)

    def weight_sums(self) -> np.ndarray:
        return np.bincount(self.particle, weights=self.weight, minlength=self.particle_count)


class PorosityMapper:
    """
    Solid volume of spheres per cell: exact when a sphere sits inside one cell,
    otherwise shared by a fixed, seeded set of points filling the unit ball.
    """

    def __init__(self, grid: StructuredGrid, samples: int = 10_000, seed: int = 12345,
                 logger: Optional[logging.Logger] = None):
        self.grid = grid
        self.samples = samples
        self.logger = logger or logging.getLogger("thermodem.fluid")
        rng = np.random.default_rng(seed)
        pts = rng.standard_normal((samples, 3))
        pts /= np.linalg.norm(pts, axis=1)[:, None]
        pts *= np.cbrt(rng.random(samples))[:, None]
        self.unit_points = pts
        self.warnings = 0

    def weights(self, centres: np.ndarray, radii: np.ndarray) -> PartitionWeights:
        grid = self.grid
        centres = np.atleast_2d(centres)
        radii = np.asarray(radii, dtype=float)
        lo_idx, _ = grid.locate(centres - radii[:, None])
        hi_idx, _ = grid.locate(centres + radii[:, None])
        inside_box = np.all(centres - radii[:, None] >= grid.origin, axis=1) & np.all(
            centres + radii[:, None] <= grid.upper, axis=1
        )
        single = np.all(lo_idx == hi_idx, axis=1) & inside_box
        pid, cells, w = [], [], []
        if np.any(single):
            idx = np.flatnonzero(single)
            pid.append(idx)
            cells.append(grid.flat_index(lo_idx[idx]))
            w.append(np.ones(idx.size))
        clipped = 0
        for p in np.flatnonzero(~single):
            pts = centres[p] + radii[p] * self.unit_points
            cell_idx, inside = grid.locate(pts)
            if not np.all(inside):
                clipped += 1
            flat = grid.flat_index(cell_idx[inside])
            counts = np.bincount(flat, minlength=grid.cell_count)
            hit = np.flatnonzero(counts)
            pid.append(np.full(hit.size, p))
            cells.append(hit)
            w.append(counts[hit] / self.samples)
        if clipped:
            self.warnings += clipped
            self.logger.warning(f"{clipped} particle(s) extend beyond the fluid domain; their volume is clipped")
        if pid:
            return PartitionWeights(np.concatenate(pid), np.concatenate(cells), np.concatenate(w),
                                    centres.shape[0], grid.cell_count, clipped)
        return PartitionWeights(np.zeros(0, int), np.zeros(0, int), np.zeros(0), centres.shape[0],
                                grid.cell_count, 0)


def compute_porosity(weights: PartitionWeights, volumes: np.ndarray, grid: StructuredGrid,
                     min_porosity: float = 0.05) -> np.ndarray:
    """eps = 1 - solid volume / cell volume, kept strictly positive"""
    solid = weights.scatter(volumes).reshape(grid.shape) / grid.cell_volume
    return np.clip(1.0 - solid, min_porosity, 1.0)


# -- sub-grid velocity and diagnostics ----------------------------------------------


def subgrid_velocity(subgrid: SubgridState, seed) -> np.ndarray:
    """u' = sqrt(2k/3) psi per component, psi standard white noise"""
    k = np.asarray(subgrid.k, dtype=float)
    if np.any(k < 0.0):
        raise ConfigurationError("sub-grid kinetic energy must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    psi = rng.standard_normal(k.shape + (3,))
    return np.sqrt(2.0 * k / 3.0)[..., None] * psi


def smagorinsky_k(grid: StructuredGrid, velocity: np.ndarray, cs: float = 0.17, ck: float = 0.094) -> SubgridState:
    """Algebraic sub-grid energy from the resolved strain rate"""
    delta = float(np.cbrt(grid.cell_volume))
    grads = [[np.gradient(velocity[..., i], grid.spacing[j], axis=j) if grid.shape[j] > 1
              else np.zeros(grid.shape) for j in range(3)] for i in range(3)]
    s2 = np.zeros(grid.shape)
    for i in range(3):
        for j in range(3):
            sij = 0.5 * (grads[i][j] + grads[j][i])
            s2 += 2.0 * sij ** 2
    nu_t = (cs * delta) ** 2 * np.sqrt(s2)
    return SubgridState((nu_t / (ck * delta)) ** 2, delta)


@dataclass
class ColumnParams:
    inlet_area: float
    density: float
    z_low: float
    z_high: float
    a: float
    gravity: float = 9.81


def kinetic_energy_diagnostics(state: PhaseField, grid: StructuredGrid, column: ColumnParams,
                               time: float) -> Tuple[float, float]:
    """
    Kinetic energy of the fluid over the potential energy of the column, and the
    dimensionless time t sqrt(2 g / a).
    """
    if column.a <= 0.0:
        raise ConfigurationError(f"column parameter a must be positive, got {column.a}")
    kinetic = 0.0
    for phase in state.phases:
        u = phase.cell_velocity()
        kinetic += float((0.5 * phase.fraction * phase.density * (u ** 2).sum(axis=-1)).sum() * grid.cell_volume)
    potential = column.inlet_area * column.density * column.gravity * 0.5 * (column.z_high ** 2 - column.z_low ** 2)
    t_star = time * math.sqrt(2.0 * column.gravity / column.a)
    return kinetic / potential, t_star


def write_vtk(path: Path, grid: StructuredGrid, state: PhaseField, title: str = "thermodem field") -> None:
    """Legacy ASCII structured-points file with cell data"""
    nx, ny, nz = grid.shape
    lines = [
        "# vtk DataFile Version 3.0",
        title[:255],
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}",
        "ORIGIN " + " ".join(f"{v:.9g}" for v in grid.origin),
        "SPACING " + " ".join(f"{v:.9g}" for v in grid.spacing),
        f"CELL_DATA {grid.cell_count}",
    ]

    def scalars(name, values):
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(f"{v:.9g}" for v in np.asarray(values).ravel(order="F"))

    scalars("eps", state.porosity)
    scalars("p", state.pressure)
    for phase in state.phases:
        scalars(f"eps_{phase.name}", phase.fraction)
        scalars(f"h_{phase.name}", phase.enthalpy)
        scalars(f"T_{phase.name}", phase.temperature)
    for phase in state.phases:
        v = phase.cell_velocity()
        lines.append(f"VECTORS v_{phase.name} double")
        flat = [v[..., c].ravel(order="F") for c in range(3)]
        lines.extend(f"{a:.9g} {b:.9g} {c:.9g}" for a, b, c in zip(*flat))
    Path(path).write_text("\n".join(lines) + "\n")
