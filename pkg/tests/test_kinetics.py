import numpy as np
import pytest

from subsolvers.errors import ConfigurationError
from subsolvers.kinetics import (
    ReactionMechanism,
    available_mechanisms,
    builtin_mechanism,
    combine_mechanisms,
    integrate_batch,
    parse_equation,
)


def simple(equation, A=1.0, K=None):
    entry = {"equation": equation, "arrhenius": {"A": A}}
    if K is not None:
        entry["equilibrium"] = {"T": [200.0, 2000.0], "K": [K, K]}
    return ReactionMechanism.from_equations("test", [entry])


def test_parse_equation():
    reactants, products, reversible = parse_equation("2 A + B <=> 3 C")
    assert reactants == {"A": 2.0, "B": 1.0}
    assert products == {"C": 3.0}
    assert reversible


def test_parse_equation_fractional_and_dotted_names():
    reactants, products, reversible = parse_equation("WO2.9(S) + 0.18 H2 -> WO2.72(S) + 0.18 H2O")
    assert reactants == {"WO2.9(S)": 1.0, "H2": 0.18}
    assert products == {"WO2.72(S)": 1.0, "H2O": 0.18}
    assert not reversible


def test_parse_equation_without_arrow():
    with pytest.raises(ValueError):
        parse_equation("A + B")


def test_first_order_rate():
    mech = simple("A -> B", A=2.0)
    rate = mech.rate_of_species({"A": 3.0}, 300.0)
    np.testing.assert_allclose(rate, [-6.0, 6.0])


def test_zero_reactant_gives_zero_rate():
    mech = simple("A + B -> C", A=5.0)
    np.testing.assert_array_equal(mech.rate_of_species({"A": 0.0, "B": 2.0}, 500.0), 0.0)


def test_equilibrium_quotient_gives_zero_rate():
    mech = simple("A <=> B", K=4.0)
    np.testing.assert_allclose(mech.rate_of_species({"A": 1.0, "B": 4.0}, 400.0), 0.0, atol=1e-15)


def test_reversible_reaction_needs_equilibrium():
    with pytest.raises(ConfigurationError, match="equilibrium"):
        ReactionMechanism.from_equations("bad", [{"equation": "A <=> B", "arrhenius": {"A": 1.0}}])


def test_batch_starting_at_equilibrium_stays_constant():
    mech = simple("A <=> B", K=1.0)
    traj = integrate_batch(mech, {"A": 2.0, "B": 2.0}, 300.0, t_end=5.0, dt=0.1)
    np.testing.assert_allclose(traj.concentrations, 2.0, rtol=1e-14)


def test_batch_reaches_equilibrium_ratio():
    mech = simple("A <=> B", K=4.0)
    traj = integrate_batch(mech, {"A": 1.0}, 300.0, t_end=30.0, dt=0.05)
    final = traj.final()
    assert final["B"] / final["A"] == pytest.approx(4.0, rel=1e-3)
    assert final["A"] + final["B"] == pytest.approx(1.0, rel=1e-12)


def test_batch_first_order_decay():
    mech = simple("A -> B", A=1.0)
    traj = integrate_batch(mech, {"A": 1.0}, 300.0, t_end=2.0, dt=0.01)
    np.testing.assert_allclose(traj.concentrations[:, 0], np.exp(-traj.times), rtol=5e-3)


def test_batch_rejects_nonpositive_dt():
    with pytest.raises(ConfigurationError):
        integrate_batch(simple("A -> B"), {"A": 1.0}, 300.0, 1.0, 0.0)


def test_batch_conserves_elements(database):
    mech = builtin_mechanism("wo2-reduction")
    traj = integrate_batch(mech, {"WO2(S)": 100.0, "H2": 50.0}, 1000.0, t_end=0.5, dt=1e-3)
    start = mech.element_totals(traj.concentrations[0])
    end = mech.element_totals(traj.concentrations[-1])
    for element in ("W", "O", "H"):
        assert end[element] == pytest.approx(start[element], rel=1e-10)
    assert traj.final()["W(S)"] > 0.0


def test_wo2_reduction_gives_two_water_per_oxide():
    mech = builtin_mechanism("wo2-reduction")
    rate = mech.rate_of_species({"WO2(S)": 10.0, "H2": 40.0}, 1073.15)
    idx = mech.species_index
    assert rate[idx["H2O"]] / -rate[idx["WO2(S)"]] == pytest.approx(2.0, rel=1e-14)
    assert rate[idx["H2"]] / rate[idx["H2O"]] == pytest.approx(-1.0, rel=1e-14)


def test_wo3_chain_releases_three_water_per_trioxide():
    mech = builtin_mechanism("wo3-reduction")
    water = mech.nu_net[:, mech.species_index["H2O"]].sum()
    assert water == pytest.approx(3.0, rel=1e-12)


def test_stoichiometric_rate_ratios(database):
    mech = builtin_mechanism("pyrolysis")
    c = mech.vector({"FUEL(S)": 50.0})
    rate = mech.rate_of_species(c, 800.0)
    q = mech.progress_rates(c, 800.0)[0]
    np.testing.assert_allclose(rate, q * mech.nu_net[0], rtol=1e-14)


def test_drying_is_zero_below_threshold():
    mech = builtin_mechanism("drying")
    c = mech.vector({"H2O(L)": 1000.0})
    assert mech.progress_rates(c, 350.0)[0] == 0.0
    assert mech.progress_rates(c, 380.0)[0] > 0.0


def test_with_threshold_moves_only_heat_limited_steps():
    mech = builtin_mechanism("drying").with_threshold(400.0)
    c = mech.vector({"H2O(L)": 1000.0})
    assert mech.progress_rates(c, 390.0)[0] == 0.0
    assert mech.progress_rates(c, 410.0)[0] > 0.0
    assert builtin_mechanism("drying").reactions[0].threshold_temperature == 373.15


def test_unbalanced_reaction_is_rejected(database):
    with pytest.raises(ConfigurationError, match="unbalanced"):
        ReactionMechanism.from_equations(
            "bad", [{"equation": "WO2(S) + H2 -> W(S) + H2O", "arrhenius": {"A": 1.0}}], database
        )


def test_unknown_mechanism_lists_available():
    with pytest.raises(ConfigurationError) as info:
        builtin_mechanism("cold-fusion")
    for name in ("wo3-reduction", "drying", "pyrolysis", "char-gasification", "char-oxidation"):
        assert name in str(info.value)


def test_builtin_mechanisms_are_cached():
    assert builtin_mechanism("char-oxidation") is builtin_mechanism("char-oxidation")
    assert {"wo3-reduction", "wo2-reduction", "drying"} <= set(available_mechanisms())


def test_combined_mechanism_indexes_each_species_once():
    mech = combine_mechanisms(["pyrolysis", "char-gasification", "char-oxidation"])
    assert len(mech.reactions) == 4
    assert len(mech.species_names) == len(set(mech.species_names))
    assert "C(S)" in mech.species_names


def test_reaction_enthalpy_override_and_derived(database):
    mech = combine_mechanisms(["pyrolysis", "char-oxidation"])
    h = mech.reaction_enthalpies(800.0)
    assert h[0] == 1.0e4
    co2 = database.get_species("CO2").molar_enthalpy(800.0)
    c = database.get_species("C(S)").molar_enthalpy(800.0)
    o2 = database.get_species("O2").molar_enthalpy(800.0)
    assert h[1] == pytest.approx(co2 - c - o2, rel=1e-12)
