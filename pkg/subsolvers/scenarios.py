"""
Scenario driver: builds solvers from a validated config, runs them, and writes
the run directory (per-particle series, audit, fields, summary.yaml, metrics.yaml).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import yaml

from engine_version import ENGINE_NICKNAME, ENGINE_VERSION

from .coupling_engine import (
    CouplingEngine,
    CouplingSettings,
    LocalFluidSample,
    ParticleProperties,
    transfer_coefficients,
)
from .dem_motion import ContactModelParams, RigidState, Wall, write_snapshot
from .errors import EXIT_OK, ConfigurationError, EngineError
from .fluid_continuum import (
    BoundarySpec,
    ColumnParams,
    MultiFluidSolver,
    PhaseSpec,
    SolverSettings,
    StructuredGrid,
    kinetic_energy_diagnostics,
    write_vtk,
)
from .kinetics import ReactionMechanism, builtin_mechanism, combine_mechanisms
from .monitoring import RunMonitor
from .particle_interior import (
    InteriorState,
    ParticleBoundaryCondition,
    ParticleDriver,
    build_radial_mesh,
    initial_state,
)
from .plots import classify_drying_phases, phase_sequence, plateau_exit_time
from .properties import (
    P_REF,
    T_NORMAL,
    GeometryClass,
    PropertyDatabase,
    ideal_gas_density,
    load_species_database,
    mixture_heat_capacity,
    saturation_temperature,
)
from .scenario_config import (
    AmbientConfig,
    BedConfig,
    ParticleSetConfig,
    ScenarioConfig,
    apply_overrides,
    dump_config,
    parse_config,
    resolve_scenario,
)

logger = logging.getLogger("thermodem.scenarios")

GEOMETRIES = {"plate": GeometryClass.PLATE, "cylinder": GeometryClass.CYLINDER, "sphere": GeometryClass.SPHERE}


@dataclass
class RunResult:
    scenario: str
    directory: Path
    exit_code: int = EXIT_OK
    summary: Dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.exit_code == EXIT_OK


# -- building blocks -----------------------------------------------------------------


def pack_particles(ps: ParticleSetConfig, rng: np.random.Generator) -> np.ndarray:
    """Centre positions for a particle set"""
    pk = ps.packing
    if pk.kind == "explicit":
        return np.array(pk.positions, dtype=float).reshape(-1, 3) if pk.positions else np.zeros((1, 3))
    if pk.kind == "lattice":
        if pk.spacing is None:
            raise ConfigurationError(f"particles.{ps.name}.packing.spacing is required for a lattice")
        grid = np.stack(np.meshgrid(*(np.arange(c) for c in pk.counts), indexing="ij"), axis=-1).reshape(-1, 3)
        pos = np.asarray(pk.origin) + pk.spacing * (grid + 0.5)
        if pk.jitter > 0.0:
            pos = pos + rng.uniform(-pk.jitter, pk.jitter, pos.shape)
        return pos
    # random sequential addition
    lo = np.asarray(pk.region_lo) + ps.radius
    hi = np.asarray(pk.region_hi) - ps.radius
    if np.any(hi <= lo):
        raise ConfigurationError(f"particles.{ps.name}: packing region is smaller than one particle")
    placed: List[np.ndarray] = []
    attempts = 0
    while len(placed) < pk.count:
        attempts += 1
        if attempts > pk.max_attempts:
            raise ConfigurationError(
                f"particles.{ps.name}: placed {len(placed)} of {pk.count} particles in {pk.max_attempts} attempts"
            )
        trial = rng.uniform(lo, hi)
        if placed and np.min(np.linalg.norm(np.asarray(placed) - trial, axis=1)) < 2.0 * ps.radius:
            continue
        placed.append(trial)
    return np.asarray(placed).reshape(-1, 3)


def particle_mechanism(ps: ParticleSetConfig) -> Optional[ReactionMechanism]:
    if not ps.mechanisms:
        return None
    mech = builtin_mechanism(ps.mechanisms[0]) if len(ps.mechanisms) == 1 else combine_mechanisms(ps.mechanisms)
    if ps.threshold == "saturation":
        mech = mech.with_threshold(saturation_temperature(ps.pressure))
    elif ps.threshold is not None:
        mech = mech.with_threshold(float(ps.threshold))
    return mech


def particle_interior(ps: ParticleSetConfig, database: PropertyDatabase, mechanism) -> InteriorState:
    material = database.get_material(ps.material)
    mesh = build_radial_mesh(GEOMETRIES[ps.geometry], ps.radius, ps.nodes)
    extra = mechanism.species_names if mechanism is not None else ()
    return initial_state(database, material, mesh, ps.composition, ps.temperature,
                         ps.gas_composition or None, ps.pressure, extra)


def ambient_sample(ambient: AmbientConfig, database: PropertyDatabase) -> LocalFluidSample:
    species = database.resolve(list(ambient.composition))
    y = np.array([[ambient.composition[s.name] for s in species]])
    if ambient.density is not None:
        rho = ambient.density
    elif all(s.phase == "gas" for s in species):
        molar = 1.0 / sum(ambient.composition[s.name] / s.molar_mass for s in species)
        rho = float(ideal_gas_density(ambient.pressure, ambient.temperature, molar))
    else:
        raise ConfigurationError("fluid.ambient.density is required for a condensed ambient")
    cp = mixture_heat_capacity(species, y, np.array([ambient.temperature]))
    return LocalFluidSample(
        carrier="ambient",
        phase_names=["ambient"],
        temperature=np.array([ambient.temperature]),
        velocity=np.array([[0.0, 0.0, ambient.velocity]]),
        porosity=np.ones(1),
        phase_fractions=np.ones((1, 1)),
        phase_density=np.full((1, 1), rho),
        phase_velocity=np.array([[[0.0, 0.0, ambient.velocity]]]),
        phase_viscosity=np.array([ambient.viscosity]),
        partial_density={s.name: np.array([rho * ambient.composition[s.name]]) for s in species},
        density=np.array([rho]),
        viscosity=ambient.viscosity,
        conductivity=ambient.conductivity,
        heat_capacity=cp,
        diffusivity=ambient.diffusivity,
        pressure_gradient=np.zeros((1, 3)),
    )


def ambient_boundary(sample: LocalFluidSample, surface_scale: float = 1.0):
    """Boundary-condition provider following the particle's current radius"""

    def provider(state: InteriorState) -> ParticleBoundaryCondition:
        d = 2.0 * state.mesh.radius
        coeffs = transfer_coefficients(np.array([d]), sample, np.zeros((1, 3)))
        gas = [n for n in state.species.gas_names if n in sample.partial_density]
        return ParticleBoundaryCondition(
            t_inf=float(sample.temperature[0]),
            alpha=surface_scale * float(coeffs.alpha[0]),
            rho_inf={n: float(sample.partial_density[n][0]) for n in gas},
            beta={n: surface_scale * float(coeffs.beta[0]) for n in gas},
        )

    return provider


def bed_gas_flow(bed: BedConfig, ambient: AmbientConfig, database: PropertyDatabase) -> float:
    """Mass flow (kg/s) of the inlet gas through a bed, from its normal volumetric flow"""
    species = database.resolve(list(ambient.composition))
    if not all(s.phase == "gas" for s in species):
        raise ConfigurationError("particle bed needs a gaseous fluid.ambient composition")
    molar = 1.0 / sum(ambient.composition[s.name] / s.molar_mass for s in species)
    return bed.gas_flow * float(ideal_gas_density(P_REF, T_NORMAL, molar))


def outlet_mass_fraction(species: str, inflow: float, inlet: Dict[str, float], released: Dict[str, float],
                         dt: float) -> float:
    """Mass fraction of a species in the gas leaving a bed; released holds the bed's release over dt"""
    source = released.get(species, 0.0) / dt
    net = sum(released.values()) / dt
    return (inflow * inlet.get(species, 0.0) + source) / (inflow + net)


def build_grid(config: ScenarioConfig) -> StructuredGrid:
    fluid = config.fluid
    boundaries = {
        face: BoundarySpec(bc.kind, dict(bc.inflow), bc.temperature, {k: dict(v) for k, v in bc.composition.items()},
                           bc.pressure)
        for face, bc in fluid.boundaries.items()
    }
    return StructuredGrid.box(fluid.grid.lo, fluid.grid.hi, fluid.grid.counts, boundaries)


def domain_walls(grid: StructuredGrid) -> List[Wall]:
    walls = []
    for axis in range(3):
        if grid.periodic(axis):
            continue
        normal = np.zeros(3)
        normal[axis] = 1.0
        walls.append(Wall(grid.origin.copy(), normal.copy()))
        walls.append(Wall(grid.upper.copy(), -normal))
    return walls


def _stack_rigid(parts: List[RigidState]) -> RigidState:
    return RigidState(
        np.vstack([p.position for p in parts]),
        np.vstack([p.velocity for p in parts]),
        np.vstack([p.angular_velocity for p in parts]),
        np.concatenate([p.mass for p in parts]),
        np.concatenate([p.inertia for p in parts]),
        np.concatenate([p.radius for p in parts]),
        np.concatenate([p.fixed for p in parts]),
    )


# -- output helpers ----------------------------------------------------------------------


def _write_table(path: Path, header: List[str], rows: List[List[float]]) -> None:
    table = np.asarray(rows, dtype=float).reshape(-1, len(header))
    np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt="%.10g")


def _write_yaml(path: Path, data: Dict[str, Any]) -> None:
    path.write_text(yaml.dump(data, default_flow_style=False, indent=2, sort_keys=False))


def _plain(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


# -- ambient runs --------------------------------------------------------------------------


def _run_ambient(config: ScenarioConfig, database: PropertyDatabase, out: Path, summary: Dict[str, Any],
                 monitor: RunMonitor) -> None:
    dt = config.numerics.dt
    ambient = config.fluid.ambient
    sample = ambient_sample(ambient, database)
    for ps in config.particles:
        name = ps.name
        mechanism = particle_mechanism(ps)
        state = particle_interior(ps, database, mechanism)
        m0 = state.total_mass
        species0 = state.species_totals()
        bed = ps.bed
        # how many particles the simulated one stands for
        weight = bed.mass / m0 if bed is not None else float(ps.count)
        inflow = bed_gas_flow(bed, ambient, database) if bed is not None else 0.0
        provider = ambient_boundary(sample, bed.surface_scale if bed is not None else 1.0)
        driver = ParticleDriver(state, provider, mechanism, config.numerics.reaction_substeps,
                                logger=logging.getLogger("thermodem.particle"))
        steps = int(round(config.numerics.t_end / dt))
        released: Dict[str, float] = {}
        rows, rate_rows, h2o_rows = [], [], []
        previous_mass = m0
        try:
            for n in range(steps):
                report = driver.step(dt)
                monitor.tick()
                for k, v in report.released_mass.items():
                    released[k] = released.get(k, 0.0) + v
                rec = driver.history[-1]
                rate_rows.append([rec.time, (previous_mass - rec.total_mass) / dt])
                previous_mass = rec.total_mass
                if "reduction" in config.analysis:
                    h2o_rows.append([rec.time, weight * released.get("H2O", 0.0),
                                     _pore_fraction(driver.state, "H2O"),
                                     _h2o_fraction(driver.state, report.released_mass, weight, inflow, ambient, dt)])
                if n % config.numerics.output_every == 0 or n == steps - 1 or driver.state.consumed:
                    rows.append([rec.time, rec.radius, rec.surface_temperature, rec.core_temperature,
                                 rec.total_mass, rec.melted_mass])
                if driver.state.consumed:
                    logger.info(f"Particle set '{name}' consumed at t={rec.time:.4f} s")
                    break
        finally:
            series_file = f"particle_{name}.csv"
            _write_table(out / series_file,
                         ["time", "radius", "surface_temperature", "core_temperature", "mass", "melted_mass"], rows)
            summary[f"series.radius_vs_time.{name}"] = series_file
            if "drying" in config.analysis:
                rate_file = f"drying_rate_{name}.csv"
                _write_table(out / rate_file, ["time", "rate"], rate_rows)
                summary[f"series.drying_rate_vs_time.{name}"] = rate_file
            if "reduction" in config.analysis:
                h2o_file = f"h2o_{name}.csv"
                _write_table(out / h2o_file, ["time", "h2o_cumulative", "pore_h2o_fraction", "h2o_fraction"],
                             h2o_rows)
                summary[f"series.h2o_fraction_vs_time.{name}"] = h2o_file

        final = driver.history[-1]
        summary[f"{name}.count"] = ps.count
        summary[f"{name}.represented_particles"] = weight
        summary[f"{name}.final_radius"] = final.radius
        summary[f"{name}.final_mass"] = weight * final.total_mass
        summary[f"{name}.initial_mass"] = weight * m0
        for k in sorted(released):
            summary[f"{name}.released.{k}"] = weight * released[k]
        if bed is not None:
            solid_density = m0 / state.mesh.total_volume
            summary[f"{name}.bed.cross_section"] = bed.mass / (solid_density * (1.0 - bed.voidage) * bed.height)
            summary[f"{name}.bed.gas_mass_flow"] = inflow

        if "melt" in config.analysis:
            radii = [h.radius for h in driver.history]
            summary[f"{name}.consumed"] = bool(driver.state.consumed)
            summary[f"{name}.melt_time"] = final.time if driver.state.consumed else None
            summary[f"{name}.melted_mass"] = weight * final.melted_mass
            summary[f"{name}.radius_monotone"] = bool(np.all(np.diff(radii) <= 0.0))
        if "drying" in config.analysis:
            t_sat = saturation_temperature(ps.pressure)
            times = [h.time for h in driver.history]
            surface = [h.surface_temperature for h in driver.history]
            exit_time = plateau_exit_time(times, surface, t_sat)
            summary[f"{name}.saturation_temperature"] = t_sat
            summary[f"{name}.plateau_exit_time"] = exit_time
            ref = config.reference.get(f"{name}.plateau_exit_time")
            if ref is not None and exit_time is not None:
                summary[f"{name}.plateau_exit_deviation"] = (exit_time - ref) / ref
            phases = classify_drying_phases([r[0] for r in rate_rows], [r[1] for r in rate_rows])
            summary[f"{name}.drying_phases"] = ",".join(phase_sequence(phases))
            for ph in phases:
                summary[f"{name}.phase.{ph.label}.start"] = ph.start
        if "reduction" in config.analysis:
            _reduction_summary(summary, name, weight, species0, driver.state, released, database)


def _pore_fraction(state: InteriorState, species: str) -> float:
    gas = state.gas_mass.sum()
    if gas <= 0.0 or species not in state.species.gas_names:
        return 0.0
    return float(state.gas_mass[:, state.species.gas_index(species)].sum() / gas)


def _h2o_fraction(state: InteriorState, released: Dict[str, float], weight: float, inflow: float,
                  ambient: AmbientConfig, dt: float) -> float:
    """Outlet H2O mass fraction of a bed; the pore-gas fraction when no bed gas flow is set"""
    if inflow <= 0.0:
        return _pore_fraction(state, "H2O")
    gas = set(state.species.gas_names)
    bed_release = {k: weight * v for k, v in released.items() if k in gas}
    return outlet_mass_fraction("H2O", inflow, ambient.composition, bed_release, dt)


def _reduction_summary(summary, name, weight, species0, state: InteriorState, released, database) -> None:
    m_wo2 = database.get_species("WO2(S)").molar_mass
    m_h2o = database.get_species("H2O").molar_mass
    wo2_0 = species0.get("WO2(S)", 0.0) / m_wo2
    wo2_now = state.species_totals().get("WO2(S)", 0.0) / m_wo2
    h2o_inside = state.species_totals().get("H2O", 0.0) - species0.get("H2O", 0.0)
    h2o_total = (released.get("H2O", 0.0) + h2o_inside) / m_h2o
    converted = wo2_0 - wo2_now
    summary[f"{name}.wo2_initial_mol"] = weight * wo2_0
    summary[f"{name}.wo2_converted_mol"] = weight * converted
    summary[f"{name}.conversion"] = converted / wo2_0 if wo2_0 > 0.0 else 0.0
    summary[f"{name}.h2o_cumulative_kg"] = weight * (released.get("H2O", 0.0) + h2o_inside)
    summary[f"{name}.h2o_per_wo2_initial"] = h2o_total / wo2_0 if wo2_0 > 0.0 else None
    summary[f"{name}.h2o_per_wo2_converted"] = h2o_total / converted if converted > 0.0 else None


# -- coupled runs -----------------------------------------------------------------------------


def build_engine(config: ScenarioConfig, database: PropertyDatabase, threads: int = 1):
    """Solver, engine and initial coupled state for a coupled scenario"""
    fluid = config.fluid
    num = config.numerics
    grid = build_grid(config)
    specs = [PhaseSpec(p.name, dict(p.composition), p.density, p.viscosity, p.conductivity, p.temperature,
                       p.fraction, p.diffusivity) for p in fluid.phases]
    solver = MultiFluidSolver(
        grid, database, specs, fluid.gravity,
        SolverSettings(cfl_limit=num.cfl, pressure_tolerance=num.pressure_tolerance, energy=fluid.energy),
        logger=logging.getLogger("thermodem.fluid"),
    )

    rng = np.random.default_rng(num.seed)
    parts, interiors, conductivity, emissivity, mechanisms, thermal = [], [], [], [], [], []
    for ps in config.particles:
        material = database.get_material(ps.material)
        positions = pack_particles(ps, rng)
        mechanism = particle_mechanism(ps) if ps.thermal else None
        density = material.intrinsic_density * (1.0 - material.porosity)
        velocities = np.broadcast_to(np.asarray(ps.velocity, dtype=float), positions.shape)
        parts.append(RigidState.spheres(positions, ps.radius, density, velocities, ps.fixed))
        for _ in range(positions.shape[0]):
            interiors.append(particle_interior(ps, database, mechanism) if ps.thermal else None)
            conductivity.append(material.conductivity)
            emissivity.append(material.emissivity)
            mechanisms.append(mechanism)
            thermal.append(ps.thermal)
    if parts:
        rigid = _stack_rigid(parts)
    else:
        rigid = RigidState(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0),
                           np.zeros(0), np.zeros(0, dtype=bool))
    props = ParticleProperties(np.asarray(conductivity, dtype=float), np.asarray(emissivity, dtype=float),
                               mechanisms, np.asarray(thermal, dtype=bool))

    c = config.contact
    min_mass = float(rigid.mass.min()) if rigid.count else 1.0
    params = ContactModelParams.from_restitution(
        c.stiffness, c.restitution, 0.5 * min_mass,
        tangential_stiffness=c.tangential_stiffness, friction=c.friction, model=c.model,
    )
    settings = CouplingSettings(
        threads=threads,
        reaction_substeps=num.reaction_substeps,
        cutoff_factor=c.cutoff_factor,
        drag_model=fluid.drag,
        subgrid=fluid.subgrid.mode,
        subgrid_k=fluid.subgrid.k,
        porosity_samples=num.porosity_samples,
        seed=num.seed,
        gravity=tuple(fluid.gravity),
    )
    engine = CouplingEngine(solver, params, domain_walls(grid), settings, fluid.carrier,
                            logger=logging.getLogger("thermodem.coupling"))
    state = engine.initial_state(rigid, interiors, props)
    return engine, state


def _run_coupled(config: ScenarioConfig, database: PropertyDatabase, out: Path, summary: Dict[str, Any],
                 monitor: RunMonitor, threads: int) -> None:
    num = config.numerics
    dt = num.dt
    engine, state = build_engine(config, database, threads)
    grid = engine.grid
    rows: List[List[float]] = []
    energy_rows: List[List[float]] = []
    trickle: List[Tuple[float, float]] = []
    steps = int(round(num.t_end / dt))
    snapshots = out / "snapshots"
    fields = out / "fields"
    if config.output.snapshots:
        snapshots.mkdir(exist_ok=True)
    if config.output.fields:
        fields.mkdir(exist_ok=True)
    column = ColumnParams(**config.column.model_dump()) if config.column else None

    def output(state, index):
        for k, pid in enumerate(state.ids):
            s = state.interiors[k]
            if s is None:
                continue
            rows.append([state.time, pid, s.mesh.radius, s.surface_temperature, s.core_temperature, s.total_mass])
        if config.output.snapshots and state.rigid.count:
            surface = np.array([s.surface_temperature if s else np.nan for s in state.interiors])
            mass = np.array([s.total_mass if s else np.nan for s in state.interiors])
            write_snapshot(snapshots / f"particles_{index:06d}.csv", state.rigid, surface, mass)
        if config.output.fields:
            write_vtk(fields / f"field_{index:06d}.vtk", grid, state.fluid, config.name)
        if column is not None:
            e_kin, t_star = kinetic_energy_diagnostics(state.fluid, grid, column, state.time)
            energy_rows.append([state.time, t_star, e_kin])

    try:
        output(state, 0)
        for n in range(1, steps + 1):
            state = engine.advance(state, dt)
            monitor.tick(n)
            if "trickle" in config.analysis and n >= int(0.75 * steps):
                trickle.append(_trickle_sample(config, engine, state))
            if n % num.output_every == 0 or n == steps:
                output(state, n)
    finally:
        engine.close()
        if rows:
            _write_table(out / "particles.csv",
                         ["time", "id", "radius", "surface_temperature", "core_temperature", "mass"], rows)
        engine.audit.write_csv(out / "audit.csv")
        if energy_rows:
            _write_table(out / "kinetic_energy.csv", ["time", "t_star", "kinetic_energy"], energy_rows)
        mass_drift, energy_drift = engine.audit.max_drift()
        summary["audit.max_mass_drift"] = mass_drift
        summary["audit.max_energy_drift"] = energy_drift
        summary["audit.max_courant"] = max((r.courant for r in engine.audit.records), default=0.0)
        summary["particles.remaining"] = int(state.rigid.count)
        summary["particles.melted_mass"] = engine.melted_mass

    if "trickle" in config.analysis and trickle:
        arr = np.asarray(trickle)
        summary["trickle.pressure_drop"] = float(arr[:, 0].mean())
        summary["trickle.holdup"] = float(arr[:, 1].mean())


def _trickle_sample(config: ScenarioConfig, engine: CouplingEngine, state) -> Tuple[float, float]:
    """
    Frictional pressure gradient along -z (Pa/m, hydrostatic head of the mixture removed)
    and mean liquid fraction. The first phase is the liquid.
    """
    grid = engine.grid
    fluid = state.fluid
    centres = grid.axis_centres(2)
    top = np.take(fluid.pressure, -1, axis=2).mean()
    bottom = np.take(fluid.pressure, 0, axis=2).mean()
    eps = np.maximum(fluid.porosity, 1e-12)
    mixture = float((sum(p.fraction * p.density for p in fluid.phases) / eps).mean())
    gradient = (top - bottom) / (centres[-1] - centres[0]) - mixture * config.fluid.gravity[2]
    return float(gradient), float(fluid.phases[0].fraction.mean())


# -- driver -------------------------------------------------------------------------------------


def _base_summary(config: ScenarioConfig) -> Dict[str, Any]:
    return {
        "scenario": config.name,
        "engine_version": ENGINE_VERSION,
        "engine_nickname": ENGINE_NICKNAME,
        "mode": config.fluid.mode,
        "dt": config.numerics.dt,
        "t_end": config.numerics.t_end,
        "seed": config.numerics.seed,
        "status": "running",
    }


def run_config(config: ScenarioConfig, output: Union[str, Path], threads: int = 1,
               database: Optional[PropertyDatabase] = None) -> RunResult:
    """Run one validated scenario (or its sweep) into output"""
    database = database or load_species_database()
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    if config.sweep is not None:
        return _run_sweep(config, out, threads, database)

    (out / "scenario.yaml").write_text(dump_config(config))
    summary = _base_summary(config)
    monitor = RunMonitor(threads=threads, logger=logger)
    result = RunResult(config.name, out)
    logger.info(f"Running scenario '{config.name}' ({config.fluid.mode}) into {out}")
    try:
        if config.fluid.mode == "ambient":
            _run_ambient(config, database, out, summary, monitor)
        else:
            _run_coupled(config, database, out, summary, monitor, threads)
        summary["status"] = "ok"
    except EngineError as exc:
        logger.error(f"Scenario '{config.name}' failed: {exc}")
        summary["status"] = "failed"
        summary["failure"] = str(exc)
        summary["failure_type"] = type(exc).__name__
        result.exit_code = exc.exit_code
    finally:
        summary = {k: _plain(v) for k, v in summary.items()}
        _write_yaml(out / "summary.yaml", summary)
        _write_yaml(out / "metrics.yaml", monitor.finish().model_dump(mode="json"))
    result.summary = summary
    return result


def _run_sweep(config: ScenarioConfig, out: Path, threads: int, database: PropertyDatabase) -> RunResult:
    sweep = config.sweep
    base = config.model_copy(update={"sweep": None})
    summary = _base_summary(config)
    summary["sweep.key"] = sweep.key
    result = RunResult(config.name, out)
    rows = []
    for i, value in enumerate(sorted(sweep.values)):
        point = apply_overrides(base, {sweep.key: value})
        sub = run_config(point, out / f"point_{i:02d}", threads, database)
        summary[f"point_{i:02d}.value"] = value
        summary[f"point_{i:02d}.status"] = sub.summary.get("status")
        if not sub.ok:
            summary["status"] = "failed"
            summary["failure"] = f"sweep point {i} ({sweep.key}={value}): {sub.summary.get('failure')}"
            result.exit_code = sub.exit_code
            break
        dp = sub.summary.get("trickle.pressure_drop")
        holdup = sub.summary.get("trickle.holdup")
        summary[f"point_{i:02d}.pressure_drop"] = dp
        summary[f"point_{i:02d}.holdup"] = holdup
        if dp is not None and holdup is not None:
            rows.append([value, dp, holdup])
    if rows:
        _write_table(out / "sweep.csv", ["value", "pressure_drop", "holdup"], rows)
        summary["series.pressure_drop_vs_velocity"] = "sweep.csv"
        summary["series.holdup_vs_velocity"] = "sweep.csv"
    if summary["status"] == "running":
        summary["status"] = "ok"
    _write_yaml(out / "summary.yaml", summary)
    result.summary = summary
    return result


def load_scenario(name_or_path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> ScenarioConfig:
    config = parse_config(resolve_scenario(name_or_path))
    return apply_overrides(config, overrides or {})


def run_scenario(name_or_path: Union[str, Path], output: Union[str, Path],
                 overrides: Optional[Dict[str, Any]] = None, threads: int = 1) -> RunResult:
    """Resolve a catalog name or file, apply overrides such as {'numerics.dt': 0.01}, and run"""
    return run_config(load_scenario(name_or_path, overrides), output, threads)

