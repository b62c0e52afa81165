import math

import numpy as np
import pytest
from scipy.optimize import brentq

from subsolvers.errors import ConfigurationError, StepError
from subsolvers.kinetics import builtin_mechanism
from subsolvers.particle_interior import (
    ParticleBoundaryCondition,
    ParticleDriver,
    build_radial_mesh,
    compute_darcy_velocity,
    compute_melt_rate,
    darcy_velocity,
    initial_state,
    melt_rate,
    shrink_radius,
    step_interior,
)
from subsolvers.properties import GeometryClass, Material, eval_heat_capacity, saturation_temperature


def glass_sphere(database, radius=0.01, nodes=101, temperature=300.0):
    mesh = build_radial_mesh(GeometryClass.SPHERE, radius, nodes)
    return initial_state(database, database.get_material("glass"), mesh, {"SiO2(S)": 1.0}, temperature)


def ice_sphere(database, radius, nodes=11, temperature=257.15):
    mesh = build_radial_mesh(GeometryClass.SPHERE, radius, nodes)
    return initial_state(database, database.get_material("ice"), mesh, {"H2O(S)": 1.0}, temperature)


def sphere_series(bi, fo, r, terms=50):
    """Convective cooling/heating of a sphere: theta(r/R, Fo) from the eigenfunction series"""

    def characteristic(z):
        return 1.0 - z * math.cos(z) / math.sin(z) - bi

    theta = np.zeros_like(r)
    for n in range(1, terms + 1):
        z = brentq(characteristic, (n - 1) * math.pi + 1e-9, n * math.pi - 1e-9)
        c = 4.0 * (math.sin(z) - z * math.cos(z)) / (2.0 * z - math.sin(2.0 * z))
        shape = np.where(r > 0.0, np.sin(z * r) / (z * np.where(r > 0.0, r, 1.0)), 1.0)
        theta += c * math.exp(-z * z * fo) * shape
    return theta


# -- mesh ---------------------------------------------------------------------


def test_sphere_cell_volume_ratio():
    mesh = build_radial_mesh(GeometryClass.SPHERE, 1.0, 3)
    v = mesh.cell_volumes
    assert v[1] / v[0] == pytest.approx(7.0, rel=1e-14)


def test_plate_cells_are_equal():
    mesh = build_radial_mesh(GeometryClass.PLATE, 1.0, 17)
    np.testing.assert_allclose(mesh.cell_volumes, mesh.cell_volumes[0], rtol=1e-12)


def test_cylinder_total_volume():
    mesh = build_radial_mesh(GeometryClass.CYLINDER, 0.01, 100)
    assert mesh.cell_volumes.sum() == pytest.approx(math.pi * 0.01 ** 2, rel=1e-10)


def test_mesh_needs_three_nodes():
    with pytest.raises(ConfigurationError):
        build_radial_mesh(GeometryClass.SPHERE, 1.0, 2)


# -- step ---------------------------------------------------------------------


def test_isolated_inert_particle_is_unchanged(database):
    state = glass_sphere(database, nodes=21)
    bc = ParticleBoundaryCondition(t_inf=500.0)
    new, report = step_interior(state, bc, None, 0.5)
    np.testing.assert_allclose(new.temperature, state.temperature, rtol=1e-12)
    np.testing.assert_allclose(new.energy, state.energy, rtol=1e-12)
    assert new.total_mass == state.total_mass
    assert report.convective_heat == 0.0


def test_step_leaves_input_untouched(database):
    state = glass_sphere(database, nodes=21)
    before = state.energy.copy()
    step_interior(state, ParticleBoundaryCondition(t_inf=500.0, alpha=50.0), None, 1.0)
    np.testing.assert_array_equal(state.energy, before)


def test_transient_conduction_matches_series(database):
    radius, bi = 0.01, 2.0
    state = glass_sphere(database, radius=radius, nodes=101)
    glass = database.get_material("glass")
    assert glass.porosity == 0.0
    lam, rho = glass.conductivity, glass.intrinsic_density
    cp = float(eval_heat_capacity(database.get_species("SiO2(S)"), 300.0))
    diffusivity = lam / (rho * cp)
    t0, t_inf = 300.0, 400.0
    bc = ParticleBoundaryCondition(t_inf=t_inf, alpha=bi * lam / radius)
    d_fo = 2.5e-4
    dt = d_fo * radius ** 2 / diffusivity
    checkpoints = {200: 0.05, 400: 0.1, 2000: 0.5}
    r = state.mesh.centres / radius
    for n in range(1, max(checkpoints) + 1):
        state, _ = step_interior(state, bc, None, dt)
        if n in checkpoints:
            theta = (state.temperature - t_inf) / (t0 - t_inf)
            exact = sphere_series(bi, checkpoints[n], r)
            assert np.max(np.abs(theta - exact)) < 0.01, f"Fo={checkpoints[n]}"


def test_condensing_flux_adds_exact_mass(database):
    material = database.get_material("wet-coal")
    mesh = build_radial_mesh(GeometryClass.SPHERE, 0.005, 21)
    state = initial_state(database, material, mesh, {"FUEL(S)": 1.0}, 400.0, {"H2O": 1.0}, 1.0e5)
    flux = 1.0e-3
    bc = ParticleBoundaryCondition(t_inf=400.0, m_flux={"H2O": flux})
    area = GeometryClass.SPHERE.area(0.005)
    dt = 0.01
    m0 = state.total_mass
    for _ in range(20):
        state, report = step_interior(state, bc, None, dt)
        assert report.mass_exchange["H2O"] == pytest.approx(flux * area * dt, rel=1e-12)
    assert state.total_mass - m0 == pytest.approx(20 * flux * area * dt, rel=1e-8)


def test_surface_flux_onto_nonporous_particle_is_an_error(database):
    mesh = build_radial_mesh(GeometryClass.SPHERE, 0.005, 11)
    state = initial_state(database, database.get_material("ice"), mesh, {"H2O(S)": 1.0}, 257.15,
                          extra_species=("H2O",))
    with pytest.raises(StepError) as info:
        step_interior(state, ParticleBoundaryCondition(t_inf=257.15, m_flux={"H2O": 1.0e-3}), None, 0.01)
    assert info.value.field == "m_flux"
    assert info.value.index == 10

    state, report = step_interior(state, ParticleBoundaryCondition(t_inf=257.15), None, 0.01)
    assert report.mass_exchange["H2O"] == 0.0


def test_negative_film_coefficient_is_rejected():
    with pytest.raises(ConfigurationError):
        ParticleBoundaryCondition(t_inf=300.0, alpha=-1.0)


def test_nonpositive_dt_is_rejected(database):
    with pytest.raises(ConfigurationError):
        step_interior(glass_sphere(database, nodes=5), ParticleBoundaryCondition(t_inf=300.0), None, 0.0)


# -- closures -----------------------------------------------------------------


def test_melt_rate_cases():
    h_m = np.array([1000.0, 1000.0, 1000.0])
    h = np.array([900.0, 1000.0, 1334.0])
    rate = melt_rate(900.0, h, h_m, 334e3, 0.005)
    assert rate[0] == 0.0
    assert rate[1] == 0.0
    assert rate[2] == pytest.approx(180.0, rel=1e-12)


def test_darcy_velocity():
    material = Material(name="porous", intrinsic_density=1000.0, conductivity=1.0, porosity=0.5,
                        permeability=1e-12, gas_viscosity=2e-5)
    mesh = build_radial_mesh(GeometryClass.SPHERE, 0.01, 11)
    eps = np.full(mesh.cell_count, 0.5)
    u = darcy_velocity(1e5 - 1000.0 * mesh.centres, mesh, eps, material)
    np.testing.assert_allclose(u[1:-1], 1e-4, rtol=1e-9)
    assert u[0] == 0.0 and u[-1] == 0.0

    assert np.all(darcy_velocity(np.full(mesh.cell_count, 2e5), mesh, eps, material) == 0.0)

    doubled = material.model_copy(update={"permeability": 2e-12})
    u2 = darcy_velocity(1e5 - 1000.0 * mesh.centres, mesh, eps, doubled)
    np.testing.assert_allclose(u2[1:-1], 2.0 * u[1:-1], rtol=1e-12)


# -- shrinking ---------------------------------------------------------------


def test_shrink_zero_loss(database):
    state = ice_sphere(database, 0.018)
    assert shrink_radius(state, 0.0) == 0.018


def test_shrink_half_mass(database):
    state = ice_sphere(database, 0.018, nodes=3)
    m0 = state.total_mass
    new_radius = shrink_radius(state, 0.5 * m0)
    assert new_radius == pytest.approx(0.018 * 0.5 ** (1.0 / 3.0), rel=1e-12)
    assert state.mesh.radius == pytest.approx(new_radius, rel=1e-12)
    assert state.total_mass == pytest.approx(0.5 * m0, rel=1e-12)


def test_repeated_shrinking_ends_consumed(database):
    state = ice_sphere(database, 0.01)
    for _ in range(500):
        r = shrink_radius(state, 0.9 * state.cell_mass[-1])
        assert r >= 0.0
        if state.consumed:
            break
    assert state.consumed


def test_shrink_beyond_outer_cell_raises(database):
    state = ice_sphere(database, 0.01)
    with pytest.raises(StepError):
        shrink_radius(state, 2.0 * state.cell_mass[-1])


# -- melting and drying --------------------------------------------------------


def melt_run(database, radius, dt, t_end=400.0):
    state = ice_sphere(database, radius)
    initial_energy = abs(state.total_energy)
    bc = ParticleBoundaryCondition(t_inf=299.15, alpha=500.0)
    driver = ParticleDriver(state, lambda s: bc)
    driver.run(t_end, dt)
    driver.initial_energy = initial_energy
    return driver


def test_ice_sphere_melts_completely(database):
    driver = melt_run(database, 0.005, 0.05)
    m0 = driver.history[0].total_mass
    radii = [h.radius for h in driver.history]
    assert driver.state.consumed
    assert np.all(np.diff(radii) <= 0.0)
    assert driver.state.melted_mass == pytest.approx(m0, rel=1e-9)
    for report in driver.reports:
        assert abs(report.energy_residual) <= 1e-9 * driver.initial_energy


def test_melt_time_converges_with_dt(database):
    coarse = melt_run(database, 0.003, 0.1)
    fine = melt_run(database, 0.003, 0.05)
    assert coarse.state.consumed and fine.state.consumed
    assert coarse.state.time == pytest.approx(fine.state.time, rel=0.05)


def test_drying_conserves_water(database):
    pressure = 2.4e5
    mech = builtin_mechanism("drying").with_threshold(saturation_temperature(pressure))
    mesh = build_radial_mesh(GeometryClass.SPHERE, 0.005, 21)
    state = initial_state(database, database.get_material("wet-coal"), mesh,
                          {"H2O(L)": 0.6, "FUEL(S)": 0.4}, 303.15, {"H2O": 1.0}, pressure, mech.species_names)
    totals0 = state.species_totals()
    water0 = totals0["H2O(L)"] + totals0["H2O"]
    bc = ParticleBoundaryCondition(t_inf=443.15, alpha=100.0, rho_inf={"H2O": 0.495}, beta={"H2O": 0.05})
    released = 0.0
    for _ in range(1000):
        state, report = step_interior(state, bc, mech, 0.1)
        released += report.released_mass.get("H2O", 0.0)
    totals = state.species_totals()
    assert totals["H2O(L)"] < totals0["H2O(L)"]
    assert totals["H2O(L)"] + totals["H2O"] + released == pytest.approx(water0, rel=1e-10)
    assert totals["FUEL(S)"] == pytest.approx(totals0["FUEL(S)"], rel=1e-12)


def test_state_rates_are_zero_at_rest(database):
    ice = ice_sphere(database, 0.005)
    assert np.all(compute_melt_rate(ice, 0.05) == 0.0)
    assert np.all(compute_melt_rate(glass_sphere(database, nodes=11), 0.05) == 0.0)
    u = compute_darcy_velocity(ice)
    assert u.shape == (11,)
    assert np.all(u == 0.0)
