"""
One-dimensional transient heat and mass transfer inside a porous particle.

Conserved quantities per control volume are stored directly: condensed species
masses, pore-gas species masses and the absolute enthalpy content E (J,
formation enthalpy included). Temperature is recovered from E by inversion, so
reaction and phase-change heat follow from the species data without extra terms.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_banded

from .errors import ConfigurationError, StepError
from .kinetics import ReactionMechanism
from .properties import (
    R_GAS,
    GeometryClass,
    Material,
    PropertyDatabase,
    Species,
    eval_enthalpy,
    eval_heat_capacity,
    temperature_from_enthalpy,
)

logger = logging.getLogger("thermodem.particle")

MAX_POROSITY = 0.999


@dataclass
class RadialMesh:
    """Faces at node_radii (first 0, last R); node_count - 1 control volumes between them"""

    geometry: GeometryClass
    node_radii: np.ndarray

    @property
    def radius(self) -> float:
        return float(self.node_radii[-1])

    @property
    def cell_count(self) -> int:
        return self.node_radii.size - 1

    @property
    def spacing(self) -> float:
        return self.radius / self.cell_count

    @property
    def cell_volumes(self) -> np.ndarray:
        v = self.geometry.volume(self.node_radii)
        return np.diff(v)

    @property
    def face_areas(self) -> np.ndarray:
        return self.geometry.area(self.node_radii)

    @property
    def centres(self) -> np.ndarray:
        return 0.5 * (self.node_radii[:-1] + self.node_radii[1:])

    @property
    def total_volume(self) -> float:
        return float(self.geometry.volume(self.radius))


def build_radial_mesh(geometry: GeometryClass, radius: float, node_count: int) -> RadialMesh:
    if node_count < 3:
        raise ConfigurationError(f"node_count must be at least 3, got {node_count}")
    if radius <= 0.0:
        raise ConfigurationError(f"particle radius must be positive, got {radius}")
    return RadialMesh(GeometryClass(geometry), np.linspace(0.0, radius, node_count))


@dataclass
class SpeciesSet:
    """Condensed and pore-gas species tracked inside a particle"""

    condensed: List[Species]
    gas: List[Species]

    @classmethod
    def from_names(cls, database: PropertyDatabase, names: Sequence[str]) -> "SpeciesSet":
        condensed, gas, seen = [], [], set()
        for name in names:
            if name in seen:
                continue
            seen.add(name)
            sp = database.get_species(name)
            (gas if sp.phase == "gas" else condensed).append(sp)
        return cls(condensed, gas)

    @property
    def all(self) -> List[Species]:
        return self.condensed + self.gas

    @property
    def names(self) -> List[str]:
        return [s.name for s in self.all]

    @property
    def gas_names(self) -> List[str]:
        return [s.name for s in self.gas]

    def condensed_index(self, name: str) -> int:
        return [s.name for s in self.condensed].index(name)

    def gas_index(self, name: str) -> int:
        return self.gas_names.index(name)


@dataclass
class InteriorState:
    mesh: RadialMesh
    material: Material
    species: SpeciesSet
    condensed_mass: np.ndarray  # (cells, condensed) kg
    gas_mass: np.ndarray  # (cells, gas) kg
    energy: np.ndarray  # (cells,) J
    temperature: np.ndarray  # (cells,) K
    consumed_threshold: float
    consumed: bool = False
    melted_mass: float = 0.0
    time: float = 0.0

    def copy(self) -> "InteriorState":
        return InteriorState(
            mesh=RadialMesh(self.mesh.geometry, self.mesh.node_radii.copy()),
            material=self.material,
            species=self.species,
            condensed_mass=self.condensed_mass.copy(),
            gas_mass=self.gas_mass.copy(),
            energy=self.energy.copy(),
            temperature=self.temperature.copy(),
            consumed_threshold=self.consumed_threshold,
            consumed=self.consumed,
            melted_mass=self.melted_mass,
            time=self.time,
        )

    @property
    def masses(self) -> np.ndarray:
        return np.hstack([self.condensed_mass, self.gas_mass])

    @property
    def cell_mass(self) -> np.ndarray:
        return self.condensed_mass.sum(axis=1) + self.gas_mass.sum(axis=1)

    @property
    def total_mass(self) -> float:
        return float(self.cell_mass.sum())

    @property
    def total_energy(self) -> float:
        return float(self.energy.sum())

    @property
    def porosity(self) -> np.ndarray:
        solid = self.condensed_mass.sum(axis=1) / (self.material.intrinsic_density * self.mesh.cell_volumes)
        return np.clip(1.0 - solid, 0.0, MAX_POROSITY)

    @property
    def bulk_density(self) -> np.ndarray:
        return self.cell_mass / self.mesh.cell_volumes

    @property
    def specific_enthalpy(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.cell_mass > 0.0, self.energy / self.cell_mass, 0.0)

    @property
    def gas_partial_density(self) -> np.ndarray:
        """Per pore volume, kg/m3, shape (cells, gas)"""
        pore = (self.porosity * self.mesh.cell_volumes)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(pore > 0.0, self.gas_mass / pore, 0.0)

    @property
    def gas_density(self) -> np.ndarray:
        return self.gas_partial_density.sum(axis=1)

    @property
    def pressure(self) -> np.ndarray:
        if not self.species.gas:
            return np.zeros(self.mesh.cell_count)
        molar = np.array([s.molar_mass for s in self.species.gas])
        return (self.gas_partial_density / molar).sum(axis=1) * R_GAS * self.temperature

    @property
    def surface_temperature(self) -> float:
        return float(self.temperature[-1])

    @property
    def core_temperature(self) -> float:
        return float(self.temperature[0])

    def species_totals(self) -> Dict[str, float]:
        out = {s.name: float(self.condensed_mass[:, i].sum()) for i, s in enumerate(self.species.condensed)}
        out.update({s.name: float(self.gas_mass[:, i].sum()) for i, s in enumerate(self.species.gas)})
        return out


@dataclass
class ParticleBoundaryCondition:
    """Far-field data seen by the particle surface; positive m_flux enters the particle"""

    t_inf: float
    alpha: float = 0.0
    rho_inf: Dict[str, float] = field(default_factory=dict)
    beta: Dict[str, float] = field(default_factory=dict)
    q_rad: float = 0.0
    q_cond: float = 0.0
    m_flux: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        violations = []
        if self.alpha < 0.0:
            violations.append(f"alpha must be >= 0, got {self.alpha}")
        violations.extend(f"beta[{k}] must be >= 0, got {v}" for k, v in self.beta.items() if v < 0.0)
        if self.t_inf <= 0.0:
            violations.append(f"t_inf must be positive, got {self.t_inf}")
        if violations:
            raise ConfigurationError(violations, source="particle boundary condition")


@dataclass
class StepReport:
    """What crossed the particle boundary during one step (J and kg, positive into the particle)"""

    mass_exchange: Dict[str, float] = field(default_factory=dict)
    convective_heat: float = 0.0
    external_heat: float = 0.0
    species_enthalpy: float = 0.0
    reaction_heat: float = 0.0
    melt_mass: float = 0.0
    melt_energy: float = 0.0
    melt_species: Optional[str] = None
    stored_energy_change: float = 0.0
    surface_temperature: float = 0.0
    radius: float = 0.0

    @property
    def energy_residual(self) -> float:
        budget = self.convective_heat + self.external_heat + self.species_enthalpy + self.reaction_heat - self.melt_energy
        return self.stored_energy_change - budget

    @property
    def released_mass(self) -> Dict[str, float]:
        """kg handed to the surrounding fluid, per species"""
        out = {k: -v for k, v in self.mass_exchange.items()}
        if self.melt_species and self.melt_mass > 0.0:
            out[self.melt_species] = out.get(self.melt_species, 0.0) + self.melt_mass
        return out

    @property
    def released_energy(self) -> float:
        """J handed to the surrounding fluid"""
        return -self.convective_heat - self.species_enthalpy + self.melt_energy


# -- initial conditions -------------------------------------------------------


def initial_state(
    database: PropertyDatabase,
    material: Material,
    mesh: RadialMesh,
    composition: Dict[str, float],
    temperature: float,
    gas_composition: Optional[Dict[str, float]] = None,
    pressure: float = 101325.0,
    extra_species: Sequence[str] = (),
) -> InteriorState:
    """
    Uniform particle. composition holds condensed mass fractions; the pore gas
    (gas_composition, mass fractions) fills the porosity at pressure.
    """
    total = sum(composition.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(f"condensed composition must sum to 1, got {total}")
    gas_composition = gas_composition or {}
    names = list(composition) + list(gas_composition) + list(extra_species)
    if material.melts:
        names.append(material.melt_species)
        if material.melt_product:
            names.append(material.melt_product)
    species = SpeciesSet.from_names(database, names)
    bad = [n for n in composition if database.get_species(n).phase == "gas"]
    if bad:
        raise ConfigurationError(f"condensed composition lists gas species: {', '.join(bad)}")

    volumes = mesh.cell_volumes
    bulk = material.intrinsic_density * (1.0 - material.porosity)
    condensed = np.zeros((mesh.cell_count, len(species.condensed)))
    for name, frac in composition.items():
        condensed[:, species.condensed_index(name)] = frac * bulk * volumes

    gas = np.zeros((mesh.cell_count, len(species.gas)))
    if gas_composition and material.porosity > 0.0:
        molar = 1.0 / sum(y / database.get_species(n).molar_mass for n, y in gas_composition.items())
        rho = pressure * molar / (R_GAS * temperature)
        for name, y in gas_composition.items():
            gas[:, species.gas_index(name)] = y * rho * material.porosity * volumes

    t = np.full(mesh.cell_count, float(temperature))
    state = InteriorState(
        mesh=mesh,
        material=material,
        species=species,
        condensed_mass=condensed,
        gas_mass=gas,
        energy=np.zeros(mesh.cell_count),
        temperature=t,
        consumed_threshold=mesh.spacing,
    )
    state.energy = _energy_content(state, t)
    return state


def _energy_content(state: InteriorState, temperature: np.ndarray) -> np.ndarray:
    e = np.zeros(state.mesh.cell_count)
    masses = state.masses
    for i, sp in enumerate(state.species.all):
        m = masses[:, i]
        if np.any(m > 0.0):
            e += m * eval_enthalpy(sp, temperature)
    return e


def _heat_capacity(state: InteriorState) -> np.ndarray:
    c = np.zeros(state.mesh.cell_count)
    masses = state.masses
    for i, sp in enumerate(state.species.all):
        m = masses[:, i]
        if np.any(m > 0.0):
            c += m * eval_heat_capacity(sp, state.temperature)
    return c


def recover_temperature(state: InteriorState) -> None:
    """Invert the stored energy for T in every cell holding mass"""
    mass = state.cell_mass
    filled = mass > 0.0
    if not np.any(filled):
        return
    t = temperature_from_enthalpy(
        state.species.all, state.masses[filled], state.energy[filled], state.temperature[filled]
    )
    if not np.all(np.isfinite(t)):
        idx = int(np.flatnonzero(filled)[np.argmax(~np.isfinite(t))])
        raise StepError("temperature inversion diverged", module="particle", field="temperature", index=idx)
    state.temperature = state.temperature.copy()
    state.temperature[filled] = t


# -- closures -----------------------------------------------------------------


def effective_conductivity(state: InteriorState) -> np.ndarray:
    """Volume-fraction-weighted mean of solid and pore-gas conductivity"""
    eps = state.porosity
    return (1.0 - eps) * state.material.conductivity + eps * state.material.gas_conductivity


def darcy_velocity(pressure: np.ndarray, mesh: RadialMesh, porosity: np.ndarray, material: Material) -> np.ndarray:
    """
    Interstitial pore-gas velocity on every face, u = -K/(mu eps) dp/dr.

    The centre face is zero by symmetry and the surface face is closed; exchange
    with the surroundings goes through the film coefficients.
    """
    u = np.zeros(mesh.node_radii.size)
    if mesh.cell_count < 2:
        return u
    eps_face = _face_mean(porosity)
    grad = np.diff(pressure) / mesh.spacing
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = np.where(eps_face > 0.0, -material.permeability * grad / (material.gas_viscosity * eps_face), 0.0)
    u[1:-1] = inner
    return u


def compute_darcy_velocity(state: InteriorState) -> np.ndarray:
    return darcy_velocity(state.pressure, state.mesh, state.porosity, state.material)


def _face_mean(values: np.ndarray) -> np.ndarray:
    """Harmonic mean across interior faces; zero when either side is zero"""
    a, b = values[:-1], values[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where((a > 0.0) & (b > 0.0), 2.0 * a * b / (a + b), 0.0)


def melt_rate(density, enthalpy, melt_enthalpy, latent_heat: float, dt: float) -> np.ndarray:
    """m' = rho (h - h_m) / (L_f dt) where h > h_m, else 0"""
    if dt <= 0.0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    excess = np.asarray(enthalpy, dtype=float) - np.asarray(melt_enthalpy, dtype=float)
    if latent_heat <= 0.0:
        if np.any(excess > 0.0):
            raise ConfigurationError("latent heat of fusion is zero while a node exceeds the melt enthalpy")
        return np.zeros_like(excess)
    return np.where(excess > 0.0, np.asarray(density) * excess / (latent_heat * dt), 0.0)


def melt_enthalpy(state: InteriorState) -> np.ndarray:
    """h_m per cell: mixture enthalpy of the current composition at T_m"""
    t_m = np.full(state.mesh.cell_count, state.material.melt_temperature)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(state.cell_mass > 0.0, _energy_content(state, t_m) / state.cell_mass, 0.0)


def compute_melt_rate(state: InteriorState, dt: float) -> np.ndarray:
    if not state.material.melts:
        return np.zeros(state.mesh.cell_count)
    return melt_rate(
        state.bulk_density, state.specific_enthalpy, melt_enthalpy(state), state.material.latent_heat_fusion, dt
    )


# -- sub-steps ----------------------------------------------------------------


def _conduction(state: InteriorState, bc: ParticleBoundaryCondition, dt: float, report: StepReport) -> None:
    mesh = state.mesh
    n = mesh.cell_count
    dr = mesh.spacing
    areas = mesh.face_areas
    lam = effective_conductivity(state)
    cap = _heat_capacity(state)

    g = np.zeros(n + 1)
    g[1:-1] = areas[1:-1] * 2.0 * lam[:-1] * lam[1:] / (dr * (lam[:-1] + lam[1:]))
    g_s = areas[-1] / (1.0 / bc.alpha + 0.5 * dr / lam[-1]) if bc.alpha > 0.0 else 0.0

    ab = np.zeros((3, n))
    ab[1] = cap / dt + g[:-1] + g[1:]
    ab[1, -1] += g_s
    ab[0, 1:] = -g[1:-1]
    ab[2, :-1] = -g[1:-1]
    rhs = cap * state.temperature / dt
    rhs[-1] += g_s * bc.t_inf
    empty = cap <= 0.0
    if np.any(empty):
        ab[1, empty] = 1.0
        rhs[empty] = state.temperature[empty]
    t_star = solve_banded((1, 1), ab, rhs)
    if not np.all(np.isfinite(t_star)):
        raise StepError("conduction solve diverged", module="particle", field="temperature",
                        index=int(np.argmax(~np.isfinite(t_star))))

    flux = g[1:-1] * (t_star[:-1] - t_star[1:]) * dt
    delta = np.zeros(n)
    delta[:-1] -= flux
    delta[1:] += flux
    q_conv = g_s * (bc.t_inf - t_star[-1]) * dt
    q_ext = -areas[-1] * (bc.q_rad + bc.q_cond) * dt
    delta[-1] += q_conv + q_ext
    state.energy = state.energy + delta
    report.convective_heat += q_conv
    report.external_heat += q_ext


def _species_transport(state: InteriorState, bc: ParticleBoundaryCondition, dt: float, report: StepReport) -> None:
    gas = state.species.gas
    for name in state.species.gas_names:
        report.mass_exchange.setdefault(name, 0.0)
    eps = state.porosity
    if not gas:
        return
    if eps[-1] <= 0.0:
        imposed = [k for k, v in bc.m_flux.items() if v != 0.0 and k in state.species.gas_names]
        if imposed:
            raise StepError(f"surface flux of {imposed[0]} onto a nonporous surface", module="particle",
                            field="m_flux", index=state.mesh.cell_count - 1)
        return
    mesh = state.mesh
    n = mesh.cell_count
    dr = mesh.spacing
    areas = mesh.face_areas
    volumes = mesh.cell_volumes
    material = state.material

    eps_face = _face_mean(eps)
    diff = areas[1:-1] * eps_face * material.gas_diffusivity / dr
    u = compute_darcy_velocity(state)
    flow = u[1:-1] * eps_face * areas[1:-1]  # m3/s, outward positive
    out = np.clip(flow, 0.0, None)
    inw = np.clip(-flow, 0.0, None)
    a_s = areas[-1]
    t = state.temperature
    rho_old = state.gas_partial_density
    pore = eps * volumes

    ab = np.zeros((3, n))
    ab[1] = pore / dt
    ab[1, :-1] += diff + out
    ab[1, 1:] += diff + inw
    ab[0, 1:] = -diff - inw
    ab[2, :-1] = -diff - out
    empty = pore <= 0.0

    energy_delta = np.zeros(n)
    new_mass = state.gas_mass.copy()
    for k, sp in enumerate(gas):
        beta = bc.beta.get(sp.name, 0.0)
        band = ab.copy()
        band[1, -1] += beta * a_s
        rhs = pore * rho_old[:, k] / dt
        rho_inf = bc.rho_inf.get(sp.name, 0.0)
        m_flux = bc.m_flux.get(sp.name, 0.0)
        rhs[-1] += beta * a_s * rho_inf + m_flux * a_s
        if np.any(empty):
            band[1, empty] = 1.0
            rhs[empty] = 0.0
        rho = solve_banded((1, 1), band, rhs)

        face = (diff * (rho[:-1] - rho[1:]) + out * rho[:-1] - inw * rho[1:]) * dt
        surface = (beta * (rho_inf - rho[-1]) + m_flux) * a_s * dt
        m = state.gas_mass[:, k].copy()
        m[:-1] -= face
        m[1:] += face
        m[-1] += surface
        scale = max(float(np.abs(state.gas_mass[:, k]).max()), abs(surface), 1e-300)
        if np.any(m < -1e-9 * scale):
            raise StepError(f"negative pore-gas mass of {sp.name}", module="particle",
                            field=sp.name, index=int(np.argmin(m)))
        new_mass[:, k] = np.clip(m, 0.0, None)

        h_up = np.where(face > 0.0, eval_enthalpy(sp, t[:-1]), eval_enthalpy(sp, t[1:]))
        e_face = face * h_up
        energy_delta[:-1] -= e_face
        energy_delta[1:] += e_face
        h_s = eval_enthalpy(sp, bc.t_inf) if surface > 0.0 else eval_enthalpy(sp, t[-1])
        energy_delta[-1] += surface * h_s
        report.mass_exchange[sp.name] += surface
        report.species_enthalpy += surface * float(h_s)

    state.gas_mass = new_mass
    state.energy = state.energy + energy_delta


def _mechanism_columns(state: InteriorState, mechanism: ReactionMechanism):
    cols, molar = [], []
    condensed = [s.name for s in state.species.condensed]
    gas = state.species.gas_names
    for name in mechanism.species_names:
        if name in condensed:
            cols.append(condensed.index(name))
        elif name in gas:
            cols.append(len(condensed) + gas.index(name))
        else:
            raise ConfigurationError(
                f"mechanism '{mechanism.name}' uses species '{name}' not tracked by the particle; "
                f"tracked species: {', '.join(state.species.names)}"
            )
    return np.array(cols, dtype=int), np.array([state.species.all[c].molar_mass for c in cols])


def _reactions(state: InteriorState, mechanism: ReactionMechanism, dt: float, substeps: int,
               report: StepReport) -> None:
    """Finite-rate steps: explicit sub-steps with each reaction's extent capped by what it consumes"""
    finite = ~mechanism.heat_limited
    if not np.any(finite):
        return
    cols, molar = _mechanism_columns(state, mechanism)
    volumes = state.mesh.cell_volumes[:, None]
    masses = state.masses
    c = masses[:, cols] / molar / volumes
    h = dt / substeps
    nu_r = mechanism.nu_reactants
    nu_p = mechanism.nu_products
    explicit = np.array([r.enthalpy is not None for r in mechanism.reactions]) & finite
    heat = np.zeros(state.mesh.cell_count)

    for _ in range(substeps):
        q = mechanism.progress_rates(c, state.temperature)
        q[:, ~finite] = 0.0
        xi = q * h
        fwd = np.clip(xi, 0.0, None)
        rev = np.clip(-xi, 0.0, None)
        consumption = fwd @ nu_r + rev @ nu_p
        with np.errstate(divide="ignore", invalid="ignore"):
            limit = np.where(consumption > c, c / consumption, 1.0)
        consumes = np.where(xi[:, :, None] >= 0.0, nu_r[None], nu_p[None]) > 0.0
        scale = np.where(consumes, limit[:, None, :], 1.0).min(axis=2)
        xi = xi * scale
        c = np.clip(c + xi @ mechanism.nu_net, 0.0, None)
        if np.any(explicit):
            correction = mechanism.reaction_enthalpies(state.temperature) - mechanism.species_reaction_enthalpies(
                state.temperature
            )
            heat += -(xi[:, explicit] * correction[:, explicit]).sum(axis=1) * volumes[:, 0]

    if not np.all(np.isfinite(c)):
        raise StepError("non-finite concentration", module="particle", field="concentration",
                        index=int(np.argmax(~np.all(np.isfinite(c), axis=1))))
    masses[:, cols] = c * molar * volumes
    nc = len(state.species.condensed)
    state.condensed_mass = masses[:, :nc]
    state.gas_mass = masses[:, nc:]
    state.energy = state.energy + heat
    report.reaction_heat += float(heat.sum())


def _heat_limited(state: InteriorState, mechanism: ReactionMechanism, report: StepReport) -> None:
    """Energy above the threshold converts reactant into product and returns the cell to the threshold"""
    for j, rxn in enumerate(mechanism.reactions):
        if rxn.kind != "heat-limited":
            continue
        (r_name, nu_r), = rxn.reactants.items()
        (p_name, nu_p), = rxn.products.items()
        cols, molar = _mechanism_columns(state, mechanism)
        r_col = cols[mechanism.species_index[r_name]]
        p_col = cols[mechanism.species_index[p_name]]
        masses = state.masses
        hot = (state.temperature > rxn.threshold_temperature) & (masses[:, r_col] > 0.0)
        if not np.any(hot):
            continue
        t_thr = np.full(state.mesh.cell_count, rxn.threshold_temperature)
        excess = state.energy - _energy_content(state, t_thr)
        sp_r = state.species.all[r_col]
        sp_p = state.species.all[p_col]
        dh = nu_p * sp_p.molar_enthalpy(rxn.threshold_temperature) - nu_r * sp_r.molar_enthalpy(
            rxn.threshold_temperature
        )
        if dh <= 0.0:
            raise ConfigurationError(f"heat-limited reaction '{rxn.equation}' must be endothermic")
        extent = np.where(hot, np.clip(excess, 0.0, None) / dh, 0.0)
        available = masses[:, r_col] / (nu_r * sp_r.molar_mass)
        capped = extent >= available
        extent = np.minimum(extent, available)
        masses[:, r_col] = np.where(capped & hot, 0.0, masses[:, r_col] - extent * nu_r * sp_r.molar_mass)
        masses[:, p_col] += extent * nu_p * sp_p.molar_mass
        nc = len(state.species.condensed)
        state.condensed_mass = masses[:, :nc]
        state.gas_mass = masses[:, nc:]


def _melting(state: InteriorState, dt: float, report: StepReport) -> np.ndarray:
    """Remove melt and its enthalpy; returns melted mass per cell"""
    material = state.material
    n = state.mesh.cell_count
    if not material.melts:
        return np.zeros(n)
    rate = compute_melt_rate(state, dt)
    melted = rate * state.mesh.cell_volumes * dt
    col = state.species.condensed_index(material.melt_species)
    melted = np.minimum(melted, state.condensed_mass[:, col])
    if not np.any(melted > 0.0):
        return melted
    if material.melt_product is not None:
        product = state.species.condensed[state.species.condensed_index(material.melt_product)]
        h_release = eval_enthalpy(product, material.melt_temperature)
    else:
        h_release = eval_enthalpy(state.species.condensed[col], material.melt_temperature) + material.latent_heat_fusion
    released = melted * h_release
    state.condensed_mass = state.condensed_mass.copy()
    state.condensed_mass[:, col] -= melted
    state.energy = state.energy - released
    report.melt_mass += float(melted.sum())
    report.melt_energy += float(released.sum())
    report.melt_species = material.melt_product or material.melt_species
    state.melted_mass += float(melted.sum())
    return melted


def shrink_radius(state: InteriorState, surface_mass_loss: float) -> float:
    """
    Remove surface_mass_loss from the outer cell, taking its volume at the
    current outer-cell density, and remap onto a uniform mesh over the new radius.
    """
    if surface_mass_loss < 0.0:
        raise StepError("surface mass loss must be non-negative", module="particle", field="radius")
    mesh = state.mesh
    if surface_mass_loss == 0.0:
        return mesh.radius
    outer_mass = state.cell_mass[-1]
    if surface_mass_loss > outer_mass * (1.0 + 1e-12):
        raise StepError(
            f"surface loss {surface_mass_loss:.3e} kg exceeds outer-cell mass {outer_mass:.3e} kg; reduce dt",
            module="particle",
            field="radius",
            index=mesh.cell_count - 1,
        )
    keep = max(1.0 - surface_mass_loss / outer_mass, 0.0)
    state.condensed_mass = state.condensed_mass.copy()
    state.gas_mass = state.gas_mass.copy()
    state.energy = state.energy.copy()
    state.condensed_mass[-1] *= keep
    state.gas_mass[-1] *= keep
    state.energy[-1] *= keep
    return _contract(state, mesh.cell_volumes[-1] * (1.0 - keep))


def _contract(state: InteriorState, lost_volume: float) -> float:
    """Squeeze the outer cell's remaining content into its volume minus lost_volume, then remap"""
    mesh = state.mesh
    geometry = mesh.geometry
    lost_volume = min(lost_volume, mesh.cell_volumes[-1])
    new_volume = mesh.total_volume - lost_volume
    new_radius = min((new_volume / geometry.metric) ** (1.0 / (int(geometry) + 1)), mesh.radius)
    if new_radius < state.consumed_threshold:
        state.consumed = True
        return new_radius
    if new_radius >= mesh.radius:
        return mesh.radius

    old_faces = mesh.node_radii.copy()
    old_faces[-1] = new_radius
    old_centres = 0.5 * (old_faces[:-1] + old_faces[1:])
    new_mesh = RadialMesh(geometry, np.linspace(0.0, new_radius, mesh.node_radii.size))
    weights = _overlap_matrix(geometry, old_faces, new_mesh.node_radii)
    state.condensed_mass = weights @ state.condensed_mass
    state.gas_mass = weights @ state.gas_mass
    state.energy = weights @ state.energy
    state.temperature = np.interp(new_mesh.centres, old_centres, state.temperature)
    state.mesh = new_mesh
    recover_temperature(state)
    return new_radius


def _overlap_matrix(geometry: GeometryClass, old_faces: np.ndarray, new_faces: np.ndarray) -> np.ndarray:
    """W[i, j] = fraction of old cell j lying in new cell i"""
    lo = np.maximum(new_faces[:-1, None], old_faces[None, :-1])
    hi = np.minimum(new_faces[1:, None], old_faces[None, 1:])
    overlap = np.where(hi > lo, geometry.volume(hi) - geometry.volume(np.minimum(lo, hi)), 0.0)
    old_volume = np.diff(geometry.volume(old_faces))
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(old_volume > 0.0, overlap / old_volume, 0.0)
    return w


def _release_remnant(state: InteriorState, report: StepReport) -> None:
    report.melt_mass += state.total_mass
    report.melt_energy += state.total_energy
    report.melt_species = state.material.melt_product or state.material.melt_species
    state.melted_mass += state.total_mass
    state.condensed_mass = np.zeros_like(state.condensed_mass)
    state.gas_mass = np.zeros_like(state.gas_mass)
    state.energy = np.zeros_like(state.energy)


def step_interior(
    state: InteriorState,
    bc: ParticleBoundaryCondition,
    mechanism: Optional[ReactionMechanism],
    dt: float,
    reaction_substeps: int = 4,
) -> Tuple[InteriorState, StepReport]:
    """Advance one particle by dt; the input state is left untouched"""
    if dt <= 0.0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    new = state.copy()
    report = StepReport(radius=state.mesh.radius)
    if state.consumed:
        report.surface_temperature = state.surface_temperature
        return new, report

    e0 = state.total_energy
    _species_transport(new, bc, dt, report)
    recover_temperature(new)
    _conduction(new, bc, dt, report)
    recover_temperature(new)
    if mechanism is not None:
        _reactions(new, mechanism, dt, reaction_substeps, report)
        recover_temperature(new)
        if np.any(mechanism.heat_limited):
            _heat_limited(new, mechanism, report)
            recover_temperature(new)
    melted = _melting(new, dt, report)
    if melted[-1] > 0.0:
        recover_temperature(new)
        outer_before = new.cell_mass[-1] + melted[-1]
        _contract(new, new.mesh.cell_volumes[-1] * float(melted[-1]) / outer_before)
        if new.consumed:
            _release_remnant(new, report)
    elif np.any(melted > 0.0):
        recover_temperature(new)

    bad = ~np.isfinite(new.energy)
    if np.any(bad):
        raise StepError("non-finite energy", module="particle", field="energy", index=int(np.argmax(bad)))
    new.time = state.time + dt
    report.stored_energy_change = new.total_energy - e0
    report.surface_temperature = new.surface_temperature
    report.radius = new.mesh.radius
    return new, report


@dataclass
class ParticleRecord:
    time: float
    radius: float
    core_temperature: float
    surface_temperature: float
    total_mass: float
    melted_mass: float
    species: Dict[str, float]


class ParticleDriver:
    """
    Single particle in a prescribed environment.

    bc_provider is called before every step with the current state, so
    coefficients can follow the shrinking radius or a changing surface temperature.
    """

    def __init__(
        self,
        state: InteriorState,
        bc_provider: Callable[[InteriorState], ParticleBoundaryCondition],
        mechanism: Optional[ReactionMechanism] = None,
        reaction_substeps: int = 4,
        logger: Optional[logging.Logger] = None,
    ):
        self.state = state
        self.bc_provider = bc_provider
        self.mechanism = mechanism
        self.reaction_substeps = reaction_substeps
        self.logger = logger or logging.getLogger("thermodem.particle")
        self.history: List[ParticleRecord] = [self._record()]
        self.reports: List[StepReport] = []

    def _record(self) -> ParticleRecord:
        s = self.state
        return ParticleRecord(
            time=s.time,
            radius=0.0 if s.consumed else s.mesh.radius,
            core_temperature=s.core_temperature,
            surface_temperature=s.surface_temperature,
            total_mass=s.total_mass,
            melted_mass=s.melted_mass,
            species=s.species_totals(),
        )

    def step(self, dt: float) -> StepReport:
        bc = self.bc_provider(self.state)
        self.state, report = step_interior(self.state, bc, self.mechanism, dt, self.reaction_substeps)
        self.reports.append(report)
        self.history.append(self._record())
        return report

    def run(self, t_end: float, dt: float, stop_when_consumed: bool = True) -> List[ParticleRecord]:
        steps = int(round(t_end / dt))
        for n in range(steps):
            self.step(dt)
            if stop_when_consumed and self.state.consumed:
                self.logger.info(f"Particle consumed at t={self.state.time:.4f} s after {n + 1} steps")
                break
        return self.history
