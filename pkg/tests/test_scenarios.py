import numpy as np
import pytest
import yaml

from subsolvers.errors import EXIT_CONFIG_ERROR, EXIT_RUNTIME_ERROR, ConfigurationError, PlotInputError, StepError
from subsolvers.particle_interior import ParticleDriver
from subsolvers.plots import (
    CONSTANT,
    FALLING,
    WARMING,
    classify_drying_phases,
    emit_plots,
    phase_sequence,
    plateau_exit_time,
)
from subsolvers.properties import P_REF, R_GAS, T_NORMAL
from subsolvers.scenario_config import (
    apply_overrides,
    catalog_names,
    dump_config,
    parse_config,
    parse_config_text,
    resolve_scenario,
)
from subsolvers.scenarios import (
    bed_gas_flow,
    load_scenario,
    outlet_mass_fraction,
    pack_particles,
    particle_mechanism,
    run_config,
)

SMALL_MELT = """
name: small-melt
fluid:
  mode: ambient
  ambient:
    temperature: 299.15
    velocity: 0.06
    composition: {H2O(L): 1.0}
    density: 997.0
    viscosity: 8.9e-4
    conductivity: 0.6
particles:
  - name: ice
    material: ice
    composition: {H2O(S): 1.0}
    radius: 0.003
    nodes: 11
    temperature: 263.15
numerics:
  dt: 0.05
  t_end: 200.0
  output_every: 20
analysis: [melt]
"""

SMALL_TRICKLE = """
name: small-trickle
fluid:
  mode: coupled
  grid:
    hi: [0.03, 0.03, 0.048]
    counts: [1, 1, 4]
  phases:
    - name: liquid
      composition: {H2O(L): 1.0}
      density: 997.0
      viscosity: 8.9e-4
      conductivity: 0.6
      temperature: 303.15
      fraction: 0.05
    - name: gas
      composition: {N2: 1.0}
      density: 1.15
      viscosity: 1.8e-5
      conductivity: 0.026
      temperature: 303.15
  carrier: gas
  boundaries:
    z+: {kind: inlet, inflow: {gas: 0.1, liquid: 0.004}}
    z-: {kind: outlet}
  energy: false
particles:
  - name: glass
    material: glass
    composition: {SiO2(S): 1.0}
    radius: 0.0029
    temperature: 303.15
    thermal: false
    fixed: true
    packing: {kind: lattice, counts: [5, 5, 8], spacing: 0.006}
numerics:
  dt: 0.01
  t_end: 0.1
  output_every: 5
sweep:
  key: fluid.boundaries.z+.inflow.liquid
  values: [0.006, 0.002]
analysis: [trickle]
"""


def small_melt(**overrides):
    config = parse_config_text(SMALL_MELT)
    return apply_overrides(config, overrides)


# -- configuration --------------------------------------------------------------------


def test_zero_dt_names_the_field():
    text = SMALL_MELT.replace("dt: 0.05", "dt: 0.0")
    with pytest.raises(ConfigurationError) as info:
        parse_config_text(text)
    assert any(v.startswith("numerics.dt") for v in info.value.violations)
    assert info.value.exit_code == EXIT_CONFIG_ERROR


def test_every_violation_is_reported():
    text = SMALL_MELT.replace("H2O(S): 1.0", "UNOBTAINIUM: 1.0").replace("material: ice", "material: cheese")
    with pytest.raises(ConfigurationError) as info:
        parse_config_text(text)
    message = str(info.value)
    assert "unknown species 'UNOBTAINIUM'" in message
    assert "H2O(S)" in message
    assert "unknown material 'cheese'" in message
    assert len(info.value.violations) == 2


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigurationError, match="colour"):
        parse_config_text(SMALL_MELT + "colour: blue\n")


def test_yaml_syntax_error_has_position():
    with pytest.raises(ConfigurationError, match="line"):
        parse_config_text("name: [unclosed\n")


def test_dump_parse_round_trip():
    config = parse_config_text(SMALL_TRICKLE)
    assert parse_config_text(dump_config(config)) == config


def test_overrides_are_revalidated():
    assert small_melt(**{"numerics.dt": 0.01}).numerics.dt == 0.01
    with pytest.raises(ConfigurationError):
        small_melt(**{"numerics.dt": -1.0})


def test_bad_sweep_key():
    with pytest.raises(ConfigurationError, match="sweep.key"):
        parse_config_text(SMALL_TRICKLE.replace("z+.inflow.liquid", "z+.inflow.lava.depth"))


def test_catalog_entries_all_validate():
    names = catalog_names()
    assert {"trickle-bed", "ice-melt-single", "ice-melt-bed", "coal-drying-a", "coal-drying-b",
            "wo2-reduction"} <= set(names)
    for name in names:
        assert parse_config(resolve_scenario(name)).name == name


def test_unknown_scenario_lists_catalog():
    with pytest.raises(ConfigurationError, match="trickle-bed"):
        resolve_scenario("no-such-scenario")


def test_lattice_packing(rng):
    config = parse_config_text(SMALL_TRICKLE)
    positions = pack_particles(config.particles[0], rng)
    assert positions.shape == (200, 3)
    assert positions[:, 2].min() == pytest.approx(0.003)
    assert positions[:, 2].max() == pytest.approx(0.045)


def test_random_packing_keeps_particles_apart(rng):
    text = SMALL_TRICKLE.replace(
        "packing: {kind: lattice, counts: [5, 5, 8], spacing: 0.006}",
        "packing: {kind: random, count: 20, region_hi: [0.03, 0.03, 0.048]}",
    )
    ps = parse_config_text(text).particles[0]
    positions = pack_particles(ps, rng)
    d = np.linalg.norm(positions[:, None] - positions[None, :], axis=-1)
    assert np.min(d[np.triu_indices(20, 1)]) >= 2.0 * ps.radius


def test_saturation_threshold_follows_particle_pressure():
    ps = parse_config(resolve_scenario("coal-drying-a")).particles[0]
    mechanism = particle_mechanism(ps)
    assert mechanism.reactions[0].threshold_temperature == pytest.approx(399.6, abs=3.0)


# -- drying analysis -------------------------------------------------------------------


def test_trapezoid_rate_gives_three_phases():
    t = np.linspace(0.0, 100.0, 201)
    rate = np.interp(t, [0.0, 20.0, 60.0, 100.0], [0.0, 1.0, 1.0, 0.0])
    phases = classify_drying_phases(t, rate)
    assert phase_sequence(phases) == [WARMING, CONSTANT, FALLING]
    assert phases[1].start == pytest.approx(20.0, abs=5.0)
    assert phases[2].start == pytest.approx(60.0, abs=5.0)


def test_short_curve_has_no_phases():
    assert classify_drying_phases([0.0, 1.0], [0.0, 1.0]) == []


def test_plateau_exit():
    t = np.linspace(0.0, 50.0, 501)
    surface = np.interp(t, [0.0, 5.0, 25.0, 50.0], [300.0, 400.0, 400.0, 440.0])
    assert plateau_exit_time(t, surface, 400.0) == pytest.approx(26.25, abs=0.2)
    assert plateau_exit_time(t, np.full_like(t, 300.0), 400.0) is None


# -- plots ------------------------------------------------------------------------------


def test_plots_need_a_summary(tmp_path):
    with pytest.raises(PlotInputError) as info:
        emit_plots(tmp_path)
    assert info.value.missing == ["summary.yaml"]


def test_plots_name_missing_series(tmp_path):
    (tmp_path / "summary.yaml").write_text(yaml.dump({"series.radius_vs_time.ice": "particle_ice.csv"}))
    with pytest.raises(PlotInputError, match="particle_ice.csv"):
        emit_plots(tmp_path)


def test_plots_write_csv_and_script(tmp_path):
    (tmp_path / "summary.yaml").write_text(yaml.dump({"scenario": "demo", "series.radius_vs_time.ice": "r.csv"}))
    (tmp_path / "r.csv").write_text("time,radius\n1.0,0.009\n0.0,0.01\n")
    written = emit_plots(tmp_path)
    assert [p.name for p in written] == ["radius_vs_time_ice.csv", "radius_vs_time_ice.gp"]
    rows = np.loadtxt(written[0], delimiter=",", skiprows=1)
    assert rows[:, 0].tolist() == [0.0, 1.0]
    script = written[1].read_text()
    assert 'set xlabel "time (s)"' in script
    assert 'set output "radius_vs_time_ice.png"' in script


# -- runs -----------------------------------------------------------------------------------


def test_small_melt_run(tmp_path, database):
    result = run_config(small_melt(), tmp_path, database=database)
    assert result.ok
    summary = yaml.safe_load((tmp_path / "summary.yaml").read_text())
    assert summary["status"] == "ok"
    assert summary["ice.consumed"] is True
    assert summary["ice.radius_monotone"] is True
    assert summary["ice.melted_mass"] == pytest.approx(summary["ice.initial_mass"], rel=1e-9)
    for name in ("scenario.yaml", "metrics.yaml", "particle_ice.csv"):
        assert (tmp_path / name).exists()
    assert [p.name for p in emit_plots(tmp_path)] == ["radius_vs_time_ice.csv", "radius_vs_time_ice.gp"]


def test_failed_run_is_recorded(tmp_path, database):
    config = parse_config_text(SMALL_MELT.replace("    density: 997.0\n", ""))
    result = run_config(config, tmp_path, database=database)
    assert not result.ok
    assert result.exit_code == EXIT_CONFIG_ERROR
    summary = yaml.safe_load((tmp_path / "summary.yaml").read_text())
    assert summary["status"] == "failed"
    assert summary["failure_type"] == "ConfigurationError"
    assert "density" in summary["failure"]


def test_sweep_rows_are_ordered(tmp_path, database):
    result = run_config(parse_config_text(SMALL_TRICKLE), tmp_path, database=database)
    assert result.ok, result.summary.get("failure")
    rows = np.loadtxt(tmp_path / "sweep.csv", delimiter=",", skiprows=1, ndmin=2)
    assert rows[:, 0].tolist() == [0.002, 0.006]
    assert (tmp_path / "point_00" / "audit.csv").exists()
    assert result.summary["series.pressure_drop_vs_velocity"] == "sweep.csv"


def test_failing_step_keeps_particle_series(tmp_path, database, monkeypatch):
    step = ParticleDriver.step
    calls = []

    def failing_step(self, dt):
        calls.append(dt)
        if len(calls) == 5:
            raise StepError("forced failure", module="particle")
        return step(self, dt)

    monkeypatch.setattr(ParticleDriver, "step", failing_step)
    result = run_config(small_melt(**{"numerics.output_every": 1}), tmp_path, database=database)
    assert not result.ok
    assert result.exit_code == EXIT_RUNTIME_ERROR
    summary = yaml.safe_load((tmp_path / "summary.yaml").read_text())
    assert summary["status"] == "failed"
    assert summary["failure_type"] == "StepError"
    assert summary["series.radius_vs_time.ice"] == "particle_ice.csv"
    rows = np.loadtxt(tmp_path / "particle_ice.csv", delimiter=",", skiprows=1, ndmin=2)
    assert rows.shape == (4, 6)


# -- bed weighting -------------------------------------------------------------------------


def test_bed_gas_flow_uses_normal_conditions(database):
    config = load_scenario("wo2-reduction", {"fluid.ambient.composition": {"H2": 1.0}})
    molar = database.get_species("H2").molar_mass
    expected = 15.0 * P_REF * molar / (R_GAS * T_NORMAL)
    assert bed_gas_flow(config.particles[0].bed, config.fluid.ambient, database) == pytest.approx(expected, rel=1e-12)


def test_outlet_fraction_mixes_release_into_inflow():
    released = {"H2O": 0.018, "H2": -0.002}
    assert outlet_mass_fraction("H2O", 1.0, {"H2": 1.0}, released, 1.0) == pytest.approx(0.018 / 1.016)
    assert outlet_mass_fraction("H2O", 1.0, {"H2": 0.9, "H2O": 0.1}, {}, 0.5) == pytest.approx(0.1)


def test_bed_block_is_rejected_in_coupled_mode():
    text = SMALL_TRICKLE.replace("    fixed: true\n", "    fixed: true\n    bed: {mass: 0.1, height: 0.01, gas_flow: 1.0}\n")
    with pytest.raises(ConfigurationError, match="ambient mode only"):
        parse_config_text(text)


# -- reduced catalog scenarios --------------------------------------------------------------


def test_coal_drying_plateau_ordering(tmp_path, database):
    reduced = {"particles.0.nodes": 11, "numerics.t_end": 200.0}
    exits = []
    for name, radius in (("coal-drying-a", 0.001), ("coal-drying-b", 0.0012)):
        config = load_scenario(name, {**reduced, "particles.0.radius": radius})
        result = run_config(config, tmp_path / name, database=database)
        assert result.ok, result.summary.get("failure")
        assert "coal.plateau_exit_deviation" in result.summary
        exits.append(result.summary["coal.plateau_exit_time"])
    assert exits[0] is not None and exits[1] is not None
    assert exits[0] < exits[1]


def test_wo2_reduction_releases_two_moles_of_water(tmp_path, database):
    config = load_scenario("wo2-reduction", {
        "particles.0.composition": {"WO2(S)": 0.02, "W(S)": 0.98},
        "particles.0.nodes": 5,
        "numerics.dt": 0.02,
        "numerics.t_end": 20.0,
    })
    result = run_config(config, tmp_path, database=database)
    assert result.ok, result.summary.get("failure")
    summary = result.summary
    assert summary["wo2.initial_mass"] == pytest.approx(0.1, rel=1e-9)
    assert summary["wo2.conversion"] > 0.999
    assert summary["wo2.h2o_per_wo2_initial"] == pytest.approx(2.0, rel=5e-3)
    assert summary["wo2.h2o_per_wo2_converted"] == pytest.approx(2.0, rel=1e-6)
    rows = np.loadtxt(tmp_path / "h2o_wo2.csv", delimiter=",", skiprows=1, ndmin=2)
    assert rows[-1, 1] == pytest.approx(summary["wo2.released.H2O"], rel=1e-9)
    assert np.all(rows[:, 3] >= 0.0) and np.all(rows[:, 3] < 1.0)
    assert rows[:, 3].max() > 0.0


def test_trickle_sweep_pressure_drop_and_holdup_rise(tmp_path, database):
    text = SMALL_TRICKLE.replace("  t_end: 0.1\n", "  t_end: 1.0\n").replace(
        "values: [0.006, 0.002]", "values: [0.002, 0.004, 0.006, 0.008]")
    result = run_config(parse_config_text(text), tmp_path, database=database)
    assert result.ok, result.summary.get("failure")
    rows = np.loadtxt(tmp_path / "sweep.csv", delimiter=",", skiprows=1, ndmin=2)
    assert rows.shape == (4, 3)
    assert np.all(np.diff(rows[:, 1]) > 0.0)
    assert np.all(np.diff(rows[:, 2]) > 0.0)


CLOSED_MELT_BED = """
name: closed-melt-bed
fluid:
  mode: coupled
  grid:
    hi: [0.1, 0.1, 0.1]
    counts: [2, 2, 2]
  phases:
    - name: water
      composition: {H2O(L): 1.0}
      density: 997.0
      viscosity: 8.9e-4
      conductivity: 0.6
      temperature: 320.15
  carrier: water
  gravity: [0.0, 0.0, 0.0]
particles:
  - name: ice
    material: ice
    composition: {H2O(S): 1.0}
    radius: 0.003
    nodes: 11
    temperature: 257.15
    fixed: true
    packing: {kind: lattice, counts: [2, 2, 2], spacing: 0.05}
numerics:
  dt: 0.05
  t_end: 60.0
  output_every: 200
  porosity_samples: 2000
analysis: [melt]
"""


def test_closed_melting_bed_conserves_energy(tmp_path, database):
    result = run_config(parse_config_text(CLOSED_MELT_BED), tmp_path, database=database)
    assert result.ok, result.summary.get("failure")
    assert result.summary["particles.melted_mass"] > 0.0
    assert result.summary["audit.max_energy_drift"] < 5e-3
