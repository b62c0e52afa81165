"""
Reaction mechanisms: Arrhenius forward rates with tabulated equilibrium closure
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from cachetools import LRUCache, cached
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError, StepError
from .properties import R_GAS, PropertyDatabase, Species, load_species_database

logger = logging.getLogger("thermodem.kinetics")

DEFAULT_MECHANISMS = Path(__file__).parent / "data" / "mechanisms.yaml"

_TERM = re.compile(r"^\s*(?:(?P<nu>\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)\s+)?(?P<name>\S+)\s*$")


def parse_equation(equation: str) -> Tuple[Dict[str, float], Dict[str, float], bool]:
    """Split "nu A + nu B <=> nu C" into reactant and product stoichiometry"""
    if "<=>" in equation:
        lhs, rhs = equation.split("<=>", 1)
        reversible = True
    elif "->" in equation:
        lhs, rhs = equation.split("->", 1)
        reversible = False
    else:
        raise ValueError(f"equation '{equation}' has no '->' or '<=>'")

    def side(text: str) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for term in text.split(" + "):
            match = _TERM.match(term)
            if not match:
                raise ValueError(f"cannot parse term '{term.strip()}' in '{equation}'")
            nu = float(match.group("nu") or 1.0)
            if nu <= 0.0:
                raise ValueError(f"stoichiometric coefficient must be positive in '{equation}'")
            name = match.group("name")
            out[name] = out.get(name, 0.0) + nu
        return out

    return side(lhs), side(rhs), reversible


class Arrhenius(BaseModel):
    model_config = ConfigDict(extra="forbid")

    A: float = Field(ge=0.0)
    b: float = 0.0
    Ea: float = 0.0

    def __call__(self, temperature):
        t = np.asarray(temperature, dtype=float)
        return self.A * np.power(t, self.b) * np.exp(-self.Ea / (R_GAS * t))


class EquilibriumTable(BaseModel):
    model_config = ConfigDict(extra="forbid")

    T: List[float]
    K: List[float]

    @model_validator(mode="after")
    def _check(self):
        if len(self.T) != len(self.K) or not self.T:
            raise ValueError("equilibrium T and K must be non-empty and of equal length")
        if any(b <= a for a, b in zip(self.T[:-1], self.T[1:])):
            raise ValueError("equilibrium temperatures must be strictly increasing")
        if any(k <= 0.0 for k in self.K):
            raise ValueError("equilibrium constants must be positive")
        return self

    def __call__(self, temperature):
        return np.exp(np.interp(temperature, self.T, np.log(self.K)))


class Reaction(BaseModel):
    """One stoichiometric step; reactants/products are filled from the equation"""

    model_config = ConfigDict(extra="forbid")

    equation: str
    arrhenius: Arrhenius
    equilibrium: Optional[EquilibriumTable] = None
    enthalpy: Optional[float] = None
    kind: Literal["finite-rate", "heat-limited"] = "finite-rate"
    threshold_temperature: Optional[float] = Field(default=None, gt=0.0)
    reactants: Dict[str, float] = Field(default_factory=dict)
    products: Dict[str, float] = Field(default_factory=dict)
    reversible: bool = False

    @model_validator(mode="before")
    @classmethod
    def _expand_equation(cls, data):
        if isinstance(data, dict) and "equation" in data:
            reactants, products, reversible = parse_equation(data["equation"])
            data = {**data, "reactants": reactants, "products": products, "reversible": reversible}
        return data

    @model_validator(mode="after")
    def _check_closure(self):
        if self.reversible and self.equilibrium is None:
            raise ValueError(f"reversible reaction '{self.equation}' needs an equilibrium table")
        if not self.reversible and self.equilibrium is not None:
            raise ValueError(f"irreversible reaction '{self.equation}' cannot carry an equilibrium table")
        if self.kind == "heat-limited":
            if self.threshold_temperature is None:
                raise ValueError(f"heat-limited reaction '{self.equation}' needs threshold_temperature")
            if len(self.reactants) != 1 or len(self.products) != 1:
                raise ValueError("heat-limited reactions convert exactly one species into one other")
        return self


class MechanismRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    description: str = ""
    reactions: List[Reaction]


class MechanismFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mechanisms: Dict[str, MechanismRecord]


class ReactionMechanism:
    """
    Ordered reactions over a fixed species index.

    Stoichiometry is stored as dense (reactions x species) matrices so that
    rates vectorize over any number of nodes.
    """

    def __init__(
        self,
        name: str,
        reactions: Sequence[Reaction],
        database: Optional[PropertyDatabase] = None,
        logger: Optional[logging.Logger] = None,
    ):
        self.name = name
        self.reactions: List[Reaction] = list(reactions)
        self.logger = logger or logging.getLogger("thermodem.kinetics")

        names: List[str] = []
        for rxn in self.reactions:
            for sp in list(rxn.reactants) + list(rxn.products):
                if sp not in names:
                    names.append(sp)
        self.species_names: List[str] = names
        self.species_index: Dict[str, int] = {n: i for i, n in enumerate(names)}

        n_r, n_s = len(self.reactions), len(names)
        self.nu_reactants = np.zeros((n_r, n_s))
        self.nu_products = np.zeros((n_r, n_s))
        for j, rxn in enumerate(self.reactions):
            for sp, nu in rxn.reactants.items():
                self.nu_reactants[j, self.species_index[sp]] = nu
            for sp, nu in rxn.products.items():
                self.nu_products[j, self.species_index[sp]] = nu
        self.nu_net = self.nu_products - self.nu_reactants
        self.heat_limited = np.array([r.kind == "heat-limited" for r in self.reactions], dtype=bool)

        self.species: Optional[List[Species]] = None
        self.molar_masses: Optional[np.ndarray] = None
        if database is not None:
            self.species = database.resolve(names)
            self.molar_masses = np.array([s.molar_mass for s in self.species])
            self._check_element_balance()

    @classmethod
    def from_equations(cls, name: str, entries: Sequence[dict], database: Optional[PropertyDatabase] = None):
        try:
            reactions = [Reaction.model_validate(e) for e in entries]
        except ValidationError as exc:
            raise ConfigurationError(_format_errors(exc, name)) from exc
        except ValueError as exc:
            raise ConfigurationError(f"{name}: {exc}") from exc
        return cls(name, reactions, database)

    def _check_element_balance(self) -> None:
        violations = []
        for rxn in self.reactions:
            balance: Dict[str, float] = {}
            for sp, nu in rxn.reactants.items():
                for el, count in self.species[self.species_index[sp]].elements.items():
                    balance[el] = balance.get(el, 0.0) + nu * count
            for sp, nu in rxn.products.items():
                for el, count in self.species[self.species_index[sp]].elements.items():
                    balance[el] = balance.get(el, 0.0) - nu * count
            off = {el: v for el, v in balance.items() if abs(v) > 1e-9}
            if off:
                violations.append(f"'{rxn.equation}' unbalanced in {', '.join(sorted(off))}")
        if violations:
            raise ConfigurationError(violations, source=f"mechanism {self.name}")

    # -- rates -----------------------------------------------------------------

    def vector(self, concentrations: Mapping[str, float]) -> np.ndarray:
        """Map {species: c} onto the mechanism's index"""
        unknown = [k for k in concentrations if k not in self.species_index]
        if unknown:
            raise ConfigurationError(
                f"species {', '.join(unknown)} not in mechanism '{self.name}'; "
                f"indexed species: {', '.join(self.species_names)}"
            )
        c = np.zeros(len(self.species_names))
        for k, v in concentrations.items():
            c[self.species_index[k]] = v
        return c

    def forward_constants(self, temperature) -> np.ndarray:
        """k_f per reaction, shape (..., n_reactions)"""
        t = np.asarray(temperature, dtype=float)
        return np.stack([r.arrhenius(t) for r in self.reactions], axis=-1)

    def equilibrium_constants(self, temperature) -> np.ndarray:
        t = np.asarray(temperature, dtype=float)
        cols = [r.equilibrium(t) if r.reversible else np.full(t.shape, np.inf) for r in self.reactions]
        return np.stack(cols, axis=-1)

    def reaction_enthalpies(self, temperature) -> np.ndarray:
        """H_k in J/mol per reaction: explicit value, else from species enthalpies"""
        t = np.asarray(temperature, dtype=float)
        derived = self.species_reaction_enthalpies(t)
        explicit = np.array([np.nan if r.enthalpy is None else r.enthalpy for r in self.reactions])
        return np.where(np.isnan(explicit), derived, explicit)

    def species_reaction_enthalpies(self, temperature) -> np.ndarray:
        if self.species is None:
            raise ConfigurationError(f"mechanism '{self.name}' has no species database attached")
        t = np.asarray(temperature, dtype=float)
        h = np.stack([s.molar_enthalpy(t) for s in self.species], axis=-1)
        return h @ self.nu_net.T

    def progress_rates(self, concentrations, temperature) -> np.ndarray:
        """q_j = k_f (prod c_R^nu' - prod c_P^nu'' / K_eq); zero for heat-limited steps below threshold"""
        c = np.clip(np.asarray(concentrations, dtype=float), 0.0, None)
        t = np.asarray(temperature, dtype=float)
        forward = np.prod(c[..., None, :] ** self.nu_reactants, axis=-1)
        reverse = np.prod(c[..., None, :] ** self.nu_products, axis=-1)
        q = self.forward_constants(t) * (forward - reverse / self.equilibrium_constants(t))
        for j, rxn in enumerate(self.reactions):
            if rxn.kind == "heat-limited":
                q[..., j] = np.where(t >= rxn.threshold_temperature, q[..., j], 0.0)
        return q

    def rate_of_species(self, concentrations, temperature) -> np.ndarray:
        """dc/dt in mol/(m3 s), same trailing shape as concentrations"""
        if isinstance(concentrations, Mapping):
            concentrations = self.vector(concentrations)
        return self.progress_rates(concentrations, temperature) @ self.nu_net

    def element_totals(self, concentrations) -> Dict[str, np.ndarray]:
        if self.species is None:
            raise ConfigurationError(f"mechanism '{self.name}' has no species database attached")
        c = np.asarray(concentrations, dtype=float)
        totals: Dict[str, np.ndarray] = {}
        for i, sp in enumerate(self.species):
            for el, count in sp.elements.items():
                totals[el] = totals.get(el, 0.0) + count * c[..., i]
        return totals

    def with_threshold(self, temperature: float) -> "ReactionMechanism":
        """Copy with every heat-limited threshold moved to temperature"""
        reactions = [
            r.model_copy(update={"threshold_temperature": temperature}) if r.kind == "heat-limited" else r
            for r in self.reactions
        ]
        clone = ReactionMechanism.__new__(ReactionMechanism)
        clone.__dict__.update(self.__dict__)
        clone.reactions = reactions
        return clone


@dataclass
class BatchTrajectory:
    species: List[str]
    times: np.ndarray
    concentrations: np.ndarray
    substeps: int = 0
    extra: Dict[str, float] = field(default_factory=dict)

    def final(self) -> Dict[str, float]:
        return dict(zip(self.species, self.concentrations[-1]))


def integrate_batch(
    mechanism: ReactionMechanism,
    c0: Union[Mapping[str, float], np.ndarray],
    temperature: float,
    t_end: float,
    dt: float,
    max_halvings: int = 40,
) -> BatchTrajectory:
    """
    Closed isothermal vessel, classical RK4 per output step.

    A step whose result would go negative is retried with half the sub-step.
    """
    if dt <= 0.0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    c = mechanism.vector(c0) if isinstance(c0, Mapping) else np.asarray(c0, dtype=float).copy()
    n_out = int(np.ceil(t_end / dt - 1e-12))
    times = np.zeros(n_out + 1)
    traj = np.zeros((n_out + 1, c.size))
    traj[0] = c
    substeps = 0

    def rhs(x):
        r = mechanism.rate_of_species(x, temperature)
        if not np.all(np.isfinite(r)):
            raise StepError("non-finite reaction rate", module="kinetics", field="rate")
        return r

    t = 0.0
    for n in range(1, n_out + 1):
        target = min(n * dt, t_end)
        h = target - t
        while t < target - 1e-15 * max(1.0, target):
            h = min(h, target - t)
            for _ in range(max_halvings):
                k1 = rhs(c)
                k2 = rhs(c + 0.5 * h * k1)
                k3 = rhs(c + 0.5 * h * k2)
                k4 = rhs(c + h * k3)
                trial = c + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
                scale = max(float(np.max(np.abs(c))), 1e-300)
                if np.all(trial >= -1e-13 * scale):
                    break
                h *= 0.5
            else:
                raise StepError(
                    f"positivity could not be restored after {max_halvings} halvings",
                    module="kinetics",
                    field="concentration",
                )
            c = np.clip(trial, 0.0, None)
            t += h
            substeps += 1
            h = min(2.0 * h, dt)
        t = target
        times[n] = t
        traj[n] = c
    return BatchTrajectory(list(mechanism.species_names), times, traj, substeps)


def _format_errors(exc: ValidationError, prefix: str) -> List[str]:
    return [f"{prefix}.{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]


def _read_yaml(path: Path) -> dict:
    try:
        return yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigurationError(f"syntax error{where}: {exc}", source=str(path)) from exc
    except OSError as exc:
        raise ConfigurationError(f"cannot read mechanism file: {exc}", source=str(path)) from exc


@cached(cache=LRUCache(maxsize=8), key=lambda path=None: str(Path(path or DEFAULT_MECHANISMS).resolve()))
def load_mechanism_file(path: Optional[Union[str, Path]] = None) -> MechanismFile:
    path = Path(path or DEFAULT_MECHANISMS)
    try:
        return MechanismFile.model_validate(_read_yaml(path))
    except ValidationError as exc:
        raise ConfigurationError(_format_errors(exc, "mechanisms"), source=str(path)) from exc


def available_mechanisms(path: Optional[Union[str, Path]] = None) -> List[str]:
    return sorted(load_mechanism_file(path).mechanisms)


@cached(cache=LRUCache(maxsize=32), key=lambda name, path=None, database_path=None: (name, str(path), str(database_path)))
def builtin_mechanism(
    name: str,
    path: Optional[Union[str, Path]] = None,
    database_path: Optional[Union[str, Path]] = None,
) -> ReactionMechanism:
    """Load a named mechanism, resolved and element-checked against the species database"""
    records = load_mechanism_file(path).mechanisms
    if name not in records:
        raise ConfigurationError(
            f"unknown mechanism '{name}'; available mechanisms: {', '.join(sorted(records))}"
        )
    mech = ReactionMechanism(name, records[name].reactions, load_species_database(database_path))
    logger.debug(f"Mechanism '{name}': {len(mech.reactions)} reactions over {mech.species_names}")
    return mech


def combine_mechanisms(names: Sequence[str], database_path: Optional[Union[str, Path]] = None) -> ReactionMechanism:
    """Concatenate several built-in mechanisms into one"""
    reactions: List[Reaction] = []
    for n in names:
        reactions.extend(builtin_mechanism(n, database_path=database_path).reactions)
    return ReactionMechanism("+".join(names), reactions, load_species_database(database_path))
