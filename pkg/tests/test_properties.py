import math

import numpy as np
import pytest

from subsolvers.errors import ConfigurationError, PropertyRangeError
from subsolvers.properties import (
    R_GAS,
    T_REF,
    GeometryClass,
    dump_species,
    eval_enthalpy,
    eval_heat_capacity,
    ideal_gas_density,
    load_species,
    load_species_database,
    mixture_enthalpy,
    saturation_temperature,
    temperature_from_enthalpy,
)

# GRI-Mech 3.0 low-temperature coefficients, evaluated directly
H2O_LOW = [4.19864056e+00, -2.03643410e-03, 6.52040211e-06, -5.48797062e-09, 1.77197817e-12,
           -3.02937267e+04, -8.49032208e-01]
N2_LOW = [3.298677e+00, 1.4082404e-03, -3.963222e-06, 5.641515e-09, -2.444854e-12,
          -1.0208999e+03, 3.950372e+00]


def nasa_h(a, t):
    return R_GAS * t * (a[0] + a[1] * t / 2 + a[2] * t ** 2 / 3 + a[3] * t ** 3 / 4 + a[4] * t ** 4 / 5 + a[5] / t)


def nasa_cp(a, t):
    return R_GAS * (a[0] + a[1] * t + a[2] * t ** 2 + a[3] * t ** 3 + a[4] * t ** 4)


@pytest.mark.parametrize("name", ["H2O(L)", "H2O(S)", "WO2(S)", "W(S)", "FUEL(S)"])
def test_condensed_enthalpy_at_reference_is_formation(database, name):
    sp = database.get_species(name)
    assert sp.molar_enthalpy(T_REF) == pytest.approx(sp.h_formation, rel=1e-12, abs=1e-9)


def test_water_vapour_reference_enthalpy_is_formation(database):
    sp = database.get_species("H2O")
    assert sp.molar_enthalpy(T_REF) == pytest.approx(-241826.0, rel=1e-3)


def test_h2o_enthalpy_matches_polynomial(database):
    sp = database.get_species("H2O")
    assert eval_enthalpy(sp, 500.0) == pytest.approx(nasa_h(H2O_LOW, 500.0) / 0.018015, rel=1e-12)


def test_n2_heat_capacity_matches_polynomial(database):
    sp = database.get_species("N2")
    assert eval_heat_capacity(sp, 300.0) == pytest.approx(nasa_cp(N2_LOW, 300.0) / 0.028014, rel=1e-12)


@pytest.mark.parametrize("name,t", [("H2O", 500.0), ("N2", 1200.0), ("H2", 999.0), ("H2O(L)", 320.0)])
def test_finite_difference_enthalpy_gives_heat_capacity(database, name, t):
    sp = database.get_species(name)
    d = 0.1
    fd = (eval_enthalpy(sp, t + d) - eval_enthalpy(sp, t - d)) / (2 * d)
    assert fd == pytest.approx(eval_heat_capacity(sp, t), rel=5e-3)


def test_heat_capacity_positive_everywhere(database):
    for sp in database.species.values():
        t = np.linspace(sp.t_min, sp.t_max, 200)
        assert np.all(eval_heat_capacity(sp, t) > 0.0)


@pytest.mark.parametrize("name", ["H2O", "N2", "H2", "O2", "CO", "CO2", "CH4"])
def test_piece_boundary_continuity(database, name):
    sp = database.get_species(name)
    tb = sp.pieces[0].t_high
    left = eval_heat_capacity(sp, tb - 1e-9)
    right = eval_heat_capacity(sp, tb + 1e-9)
    assert abs(left - right) / left < 0.01


def test_out_of_range_temperature_raises(database):
    sp = database.get_species("H2O(S)")
    with pytest.raises(PropertyRangeError) as info:
        eval_enthalpy(sp, 50.0)
    assert info.value.species == "H2O(S)"
    assert info.value.bounds == (100.0, 400.0)


def test_species_round_trip_is_exact(database, rng):
    for name in ("H2O", "WO2(S)"):
        sp = database.get_species(name)
        again = load_species(dump_species(sp))
        t = rng.uniform(sp.t_min, sp.t_max, 100)
        np.testing.assert_array_equal(sp.molar_enthalpy(t), again.molar_enthalpy(t))
        np.testing.assert_array_equal(sp.molar_heat_capacity(t), again.molar_heat_capacity(t))


def test_discontinuous_pieces_are_rejected():
    text = """
name: BAD
molar_mass: 0.01
phase: solid
h_formation: 0.0
pieces:
  - {t_low: 200.0, t_high: 500.0, coeffs: [3.0, 0.0, 0.0, 0.0, 0.0]}
  - {t_low: 500.0, t_high: 900.0, coeffs: [6.0, 0.0, 0.0, 0.0, 0.0]}
"""
    with pytest.raises(ConfigurationError, match="cp discontinuous"):
        load_species(text)


def test_unknown_species_lists_available(database):
    with pytest.raises(ConfigurationError) as info:
        database.get_species("UNOBTAINIUM")
    assert "available species" in str(info.value)
    assert "H2O" in str(info.value)


def test_database_is_cached():
    assert load_species_database() is load_species_database()


def test_temperature_inversion_recovers_temperature(database):
    species = database.resolve(["H2O", "N2", "H2"])
    y = np.array([[0.2, 0.7, 0.1], [0.0, 1.0, 0.0], [0.5, 0.0, 0.5]])
    t = np.array([450.0, 1250.0, 900.0])
    h = mixture_enthalpy(species, y, t)
    recovered = temperature_from_enthalpy(species, y, h, t_guess=600.0)
    np.testing.assert_allclose(recovered, t, rtol=1e-7)


def test_temperature_inversion_out_of_range(database):
    species = database.resolve(["H2O(S)"])
    h = eval_enthalpy(species[0], 399.0) + 1e6
    with pytest.raises(PropertyRangeError):
        temperature_from_enthalpy(species, np.array([[1.0]]), h, 300.0)


def test_ideal_gas_density():
    assert ideal_gas_density(101325.0, 273.15, 0.028014) == pytest.approx(1.2498, rel=1e-3)


def test_saturation_temperature():
    assert saturation_temperature(101325.0) == pytest.approx(373.15, rel=1e-12)
    # Clausius-Clapeyron slightly underestimates the steam-table 399.6 K at 2.4 bar
    assert saturation_temperature(2.4e5) == pytest.approx(399.6, abs=3.0)
    with pytest.raises(ConfigurationError):
        saturation_temperature(0.0)


def test_geometry_metrics():
    assert GeometryClass.SPHERE.volume(1.0) == pytest.approx(4.0 / 3.0 * math.pi)
    assert GeometryClass.CYLINDER.area(2.0) == pytest.approx(2.0 * math.pi * 2.0)
    assert GeometryClass.PLATE.volume(0.3) == pytest.approx(0.3)


def test_ice_melt_material(database):
    ice = database.get_material("ice")
    assert ice.melts
    assert ice.latent_heat_fusion == 334000.0
    gap = eval_enthalpy(database.get_species("H2O(L)"), 273.15) - eval_enthalpy(database.get_species("H2O(S)"), 273.15)
    assert gap == pytest.approx(334000.0, rel=1e-3)
