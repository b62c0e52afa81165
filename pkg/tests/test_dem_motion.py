import math

import numpy as np
import pytest

from subsolvers.errors import ConfigurationError, GeometryError
from subsolvers.dem_motion import (
    ContactModel,
    ContactModelParams,
    MotionIntegrator,
    RigidState,
    Wall,
    all_pairs_neighbors,
    contact_force,
    contact_substep,
    detect_contacts,
    gravity_force,
    integrate_motion,
    inter_particle_heat,
    neighbor_pairs,
    radiation_exchange,
    series_conductivity,
    write_snapshot,
)
from subsolvers.properties import SIGMA_SB


def contact_forces(params, walls=(), dt=0.0):
    model = ContactModel(params)

    def force(state):
        f = model.evaluate(state, detect_contacts(state, walls), dt)
        return f.force, f.torque

    return force


def test_linear_spring_force():
    state = RigidState.spheres([[0.0, 0.0, 0.0], [0.19, 0.0, 0.0]], 0.1, 1000.0)
    forces = contact_force(detect_contacts(state), state, ContactModelParams(normal_stiffness=1000.0))
    assert np.linalg.norm(forces.force[0]) == pytest.approx(10.0, rel=1e-12)
    assert forces.force[0, 0] < 0.0
    np.testing.assert_allclose(forces.force[0], -forces.force[1], rtol=0, atol=1e-15)


def test_hertz_force_scales_with_overlap_power():
    state = RigidState.spheres([[0.0, 0.0, 0.0], [0.19, 0.0, 0.0]], 0.1, 1000.0)
    params = ContactModelParams(normal_stiffness=1.0e6, model="hertz")
    forces = contact_force(detect_contacts(state), state, params)
    assert np.linalg.norm(forces.force[0]) == pytest.approx(1.0e6 * 0.01 ** 1.5, rel=1e-9)


def test_separated_pair_feels_nothing():
    state = RigidState.spheres([[0.0, 0.0, 0.0], [0.21, 0.0, 0.0]], 0.1, 1000.0)
    contacts = detect_contacts(state)
    assert len(contacts) == 0
    assert contacts.neighbors.shape == (1, 2)


@pytest.mark.parametrize("zeta", [0.005, 0.01, 0.02, 0.03, 0.04])
def test_restitution_matches_damped_oscillator(zeta):
    radius, density, k, v0 = 0.01, 1000.0, 1000.0, 0.1
    state = RigidState.spheres([[-radius - 1e-5, 0.0, 0.0], [radius + 1e-5, 0.0, 0.0]], radius, density,
                               velocities=[[v0, 0.0, 0.0], [-v0, 0.0, 0.0]])
    m_eff = 0.5 * state.mass[0]
    params = ContactModelParams(normal_stiffness=k, normal_damping=2.0 * zeta * math.sqrt(k * m_eff))
    duration = math.pi * math.sqrt(m_eff / k)
    dt = duration / 2000.0
    integrator = MotionIntegrator(contact_forces(params))
    touched = False
    for _ in range(10000):
        state = integrator.step(state, dt)
        gap = state.position[1, 0] - state.position[0, 0] - 2.0 * radius
        touched = touched or gap < 0.0
        if touched and gap > 1e-6:
            break
    assert touched
    e = (state.velocity[1, 0] - state.velocity[0, 0]) / (2.0 * v0)
    expected = math.exp(-math.pi * zeta / math.sqrt(1.0 - zeta ** 2))
    assert e == pytest.approx(expected, rel=0.01)


def test_from_restitution_inverts_closed_form():
    params = ContactModelParams.from_restitution(1000.0, 0.9, 0.002)
    zeta = params.normal_damping / (2.0 * math.sqrt(1000.0 * 0.002))
    assert math.exp(-math.pi * zeta / math.sqrt(1.0 - zeta ** 2)) == pytest.approx(0.9, rel=1e-12)
    with pytest.raises(ConfigurationError):
        ContactModelParams.from_restitution(1000.0, 1.5, 0.002)


def test_negative_stiffness_rejected():
    with pytest.raises(ConfigurationError):
        ContactModelParams(normal_stiffness=-1.0)


def test_elastic_oblique_collision_conserves_momentum():
    state = RigidState.spheres(
        [[0.0, 0.0, 0.0], [0.025, 0.004, 0.0]], [0.01, 0.014], 1500.0,
        velocities=[[0.3, 0.05, 0.0], [-0.1, 0.0, 0.02]],
    )
    p0 = state.linear_momentum()
    params = ContactModelParams(normal_stiffness=5000.0)
    state = integrate_motion(state, contact_forces(params), 1e-5, 3000)
    np.testing.assert_allclose(state.linear_momentum(), p0, rtol=1e-12, atol=1e-12 * np.linalg.norm(p0))


def test_closed_cluster_conserves_linear_and_angular_momentum(rng):
    n = 6
    positions = np.array([[i * 0.019, (i % 2) * 0.004, 0.0] for i in range(n)])
    velocities = rng.normal(0.0, 0.05, (n, 3)) + np.array([0.02, -0.01, 0.015])
    state = RigidState.spheres(positions, 0.01, 1200.0, velocities=velocities)
    p0 = state.linear_momentum()
    l0 = state.angular_momentum()
    params = ContactModelParams(normal_stiffness=2000.0, normal_damping=0.05, tangential_stiffness=1500.0,
                                friction=0.4)
    dt = 1e-5
    integrator = MotionIntegrator(contact_forces(params, dt=dt))
    for _ in range(10_000):
        state = integrator.step(state, dt)
    assert np.linalg.norm(state.linear_momentum() - p0) <= 1e-10 * np.linalg.norm(p0)
    assert np.linalg.norm(state.angular_momentum() - l0) <= 1e-10 * np.linalg.norm(l0)


def test_free_fall():
    state = RigidState.spheres([[0.0, 0.0, 0.0]], 0.01, 1000.0)
    state = integrate_motion(state, gravity_force([0.0, 0.0, -9.81]), 0.01, 100)
    assert abs(-state.position[0, 2] - 4.905) < 1e-3
    assert state.velocity[0, 2] == pytest.approx(-9.81, rel=1e-12)


def test_fixed_particles_do_not_move():
    state = RigidState.spheres([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 0.01, 1000.0, fixed=[True, False])
    state = integrate_motion(state, gravity_force([0.0, 0.0, -9.81]), 0.01, 10)
    assert np.all(state.position[0] == 0.0)
    assert state.position[1, 2] < 0.0


def test_wall_pushes_particle_back():
    state = RigidState.spheres([[0.0, 0.0, 0.009]], 0.01, 1000.0)
    floor = Wall(point=[0.0, 0.0, 0.0], normal=[0.0, 0.0, 2.0])
    contacts = detect_contacts(state, [floor])
    assert contacts.wall_overlap[0] == pytest.approx(0.001)
    forces = contact_force(contacts, state, ContactModelParams(normal_stiffness=1000.0))
    np.testing.assert_allclose(forces.force[0], [0.0, 0.0, 1.0], atol=1e-12)


def test_wall_normal_must_be_nonzero():
    with pytest.raises(GeometryError):
        Wall(point=[0.0, 0.0, 0.0], normal=[0.0, 0.0, 0.0])


def test_binned_neighbors_match_all_pairs(rng):
    positions = rng.uniform(0.0, 0.2, (300, 3))
    radii = rng.uniform(0.004, 0.01, 300)
    pairs, dist = neighbor_pairs(positions, radii)
    assert {(int(a), int(b)) for a, b in pairs} == all_pairs_neighbors(positions, radii)
    np.testing.assert_allclose(dist, np.linalg.norm(positions[pairs[:, 1]] - positions[pairs[:, 0]], axis=1))


def test_coincident_centres_raise():
    state = RigidState.spheres([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], 0.01, 1000.0)
    with pytest.raises(GeometryError):
        detect_contacts(state)


def test_contact_substep_is_tenth_of_contact_time():
    params = ContactModelParams(normal_stiffness=1000.0)
    assert contact_substep(params, 0.002) == pytest.approx(math.pi * math.sqrt(0.001 / 1000.0) / 10.0)


def test_radiation_flux():
    assert radiation_exchange(0.2, 400.0, 300.0) == pytest.approx(198.45, abs=0.01)
    assert radiation_exchange(0.2, 300.0, 300.0) == 0.0


def test_series_conductance():
    assert series_conductivity(2.0, 2.0) == pytest.approx(1.0)


def test_pair_heat_exchange_balances():
    state = RigidState.spheres([[0.0, 0.0, 0.0], [0.0195, 0.0, 0.0], [0.06, 0.0, 0.0]], [0.01, 0.01, 0.02], 1000.0)
    contacts = detect_contacts(state)
    heat = inter_particle_heat(state, [400.0, 300.0, 350.0], 2.0, contacts.neighbors, contacts.neighbor_distance)
    surface = 4.0 * math.pi * state.radius ** 2
    assert abs((heat.q_cond * surface).sum()) < 1e-12 * np.abs(heat.pair_power_cond).sum()
    assert abs((heat.q_rad * surface).sum()) < 1e-12 * np.abs(heat.pair_power_rad).sum()
    assert heat.q_cond[0] > 0.0 and heat.q_cond[1] < 0.0
    assert heat.pair_power_rad[0] > 0.0


def test_pair_flux_is_carried_by_smaller_sphere():
    positions = np.array([[0.0, 0.0, 0.0], [0.04, 0.0, 0.0]])
    state = RigidState.spheres(positions, [0.01, 0.02], 1000.0)
    pairs, dist = neighbor_pairs(positions, state.radius)
    heat = inter_particle_heat(state, [400.0, 300.0], 2.0, pairs, dist)
    view = 0.5 * (0.5 * (1.0 - math.sqrt(1.0 - 0.25)) + 0.5 * (1.0 - math.sqrt(1.0 - 1.0 / 16.0)))
    assert heat.q_rad[0] == pytest.approx(radiation_exchange(view, 400.0, 300.0), rel=1e-12)
    assert heat.q_rad[1] * 4.0 * math.pi * 0.02 ** 2 == pytest.approx(-heat.pair_power_rad[0], rel=1e-12)
    assert heat.q_cond.tolist() == [0.0, 0.0]


def test_snapshot_columns(tmp_path):
    state = RigidState.spheres([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]], 0.01, 1000.0)
    path = tmp_path / "snapshot.csv"
    write_snapshot(path, state, [300.0, 310.0], [1.0, 0.5])
    lines = path.read_text().splitlines()
    assert lines[0] == "id,x,y,z,R,vx,vy,vz,wx,wy,wz,surfaceT,massRemaining"
    assert len(lines) == 3
    assert lines[2].startswith("1,")
