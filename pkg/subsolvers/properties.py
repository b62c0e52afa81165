"""
Thermophysical property database: species polynomials, materials, geometry classes
"""

import logging
import math
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import yaml
from cachetools import LRUCache, cached
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, model_validator

from .errors import ConfigurationError, PropertyRangeError

logger = logging.getLogger("thermodem.properties")

R_GAS = 8.314462618  # J/(mol K)
T_REF = 298.15  # K
P_REF = 101325.0  # Pa
T_NORMAL = 273.15  # K, normal conditions for Nm3
SIGMA_SB = 5.670e-8  # W/(m^2 K^4)
H_VAP_WATER = 40.65e3  # J/mol at 373.15 K

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_DATABASE = DATA_DIR / "species.yaml"

ArrayLike = Union[float, np.ndarray]


class GeometryClass(IntEnum):
    """Metric exponent n of the 1D particle equations"""

    PLATE = 0
    CYLINDER = 1
    SPHERE = 2

    @property
    def metric(self) -> float:
        """c_n such that V(r) = c_n r^(n+1)"""
        return (1.0, math.pi, 4.0 * math.pi / 3.0)[int(self)]

    def volume(self, radius: ArrayLike) -> ArrayLike:
        return self.metric * np.power(radius, int(self) + 1)

    def area(self, radius: ArrayLike) -> ArrayLike:
        return (int(self) + 1) * self.metric * np.power(radius, int(self))


class PolynomialPiece(BaseModel):
    """One temperature interval; coeffs are cp/R powers a1..a5 (+ a6, a7 for NASA form)"""

    model_config = ConfigDict(extra="forbid")

    t_low: float
    t_high: float
    coeffs: List[float]

    @model_validator(mode="after")
    def _check(self):
        if self.t_high <= self.t_low:
            raise ValueError(f"t_high {self.t_high} must exceed t_low {self.t_low}")
        if len(self.coeffs) not in (5, 7):
            raise ValueError("coeffs must hold 5 (cp only) or 7 (NASA) values")
        return self


class Species(BaseModel):
    """A chemical species with piecewise-polynomial cp(T) and h(T)"""

    model_config = ConfigDict(extra="forbid")

    name: str
    molar_mass: float = Field(gt=0.0)
    phase: Literal["gas", "liquid", "solid"]
    elements: Dict[str, float] = Field(default_factory=dict)
    h_formation: Optional[float] = None
    pieces: List[PolynomialPiece]

    _bounds: np.ndarray = PrivateAttr()
    _cp: np.ndarray = PrivateAttr()
    _h0: np.ndarray = PrivateAttr()

    @model_validator(mode="after")
    def _check_pieces(self):
        if not self.pieces:
            raise ValueError("at least one polynomial piece is required")
        for left, right in zip(self.pieces[:-1], self.pieces[1:]):
            if not math.isclose(left.t_high, right.t_low, rel_tol=0.0, abs_tol=1e-9):
                raise ValueError(
                    f"pieces not contiguous: {left.t_high} K followed by {right.t_low} K"
                )
        lengths = {len(p.coeffs) for p in self.pieces}
        if len(lengths) != 1:
            raise ValueError("all pieces must use the same coefficient form")
        if lengths == {5}:
            if self.h_formation is None:
                raise ValueError("5-coefficient pieces need h_formation")
            if not self.pieces[0].t_low <= T_REF <= self.pieces[-1].t_high:
                raise ValueError(f"5-coefficient pieces must cover {T_REF} K")
        return self

    def model_post_init(self, __context) -> None:
        self._bounds = np.array([p.t_high for p in self.pieces[:-1]], dtype=float)
        self._cp = np.array([p.coeffs[:5] for p in self.pieces], dtype=float)
        self._h0 = self._integration_constants()
        self._validate_smoothness()

    # -- polynomial plumbing -------------------------------------------------

    @staticmethod
    def _h_poly(a: np.ndarray, t: ArrayLike) -> ArrayLike:
        """R * integral of the cp/R polynomial, without the constant"""
        return R_GAS * t * (a[0] + t * (a[1] / 2 + t * (a[2] / 3 + t * (a[3] / 4 + t * a[4] / 5))))

    @staticmethod
    def _cp_poly(a: np.ndarray, t: ArrayLike) -> ArrayLike:
        return R_GAS * (a[0] + t * (a[1] + t * (a[2] + t * (a[3] + t * a[4]))))

    def _integration_constants(self) -> np.ndarray:
        if len(self.pieces[0].coeffs) == 7:
            return np.array([R_GAS * p.coeffs[5] for p in self.pieces])
        consts = np.zeros(len(self.pieces))
        k_ref = int(np.searchsorted(self._bounds, T_REF, side="right"))
        consts[k_ref] = self.h_formation - self._h_poly(self._cp[k_ref], T_REF)
        for k in range(k_ref + 1, len(self.pieces)):
            tb = self.pieces[k].t_low
            consts[k] = self._h_poly(self._cp[k - 1], tb) + consts[k - 1] - self._h_poly(self._cp[k], tb)
        for k in range(k_ref - 1, -1, -1):
            tb = self.pieces[k].t_high
            consts[k] = self._h_poly(self._cp[k + 1], tb) + consts[k + 1] - self._h_poly(self._cp[k], tb)
        return consts

    def _validate_smoothness(self) -> None:
        for k, piece in enumerate(self.pieces):
            t = np.linspace(piece.t_low, piece.t_high, 50)
            if np.any(self._cp_poly(self._cp[k], t) <= 0.0):
                raise ValueError(f"species '{self.name}': cp <= 0 in [{piece.t_low}, {piece.t_high}] K")
        for k in range(len(self.pieces) - 1):
            tb = self.pieces[k].t_high
            h_left = self._h_poly(self._cp[k], tb) + self._h0[k]
            h_right = self._h_poly(self._cp[k + 1], tb) + self._h0[k + 1]
            cp_left = self._cp_poly(self._cp[k], tb)
            cp_right = self._cp_poly(self._cp[k + 1], tb)
            scale = max(abs(h_left), cp_left * tb)
            if abs(h_left - h_right) > 1e-3 * scale:
                raise ValueError(f"species '{self.name}': enthalpy discontinuous at {tb} K")
            if abs(cp_left - cp_right) > 1e-2 * cp_left:
                raise ValueError(f"species '{self.name}': cp discontinuous at {tb} K")

    # -- public evaluation -----------------------------------------------------

    @property
    def t_min(self) -> float:
        return self.pieces[0].t_low

    @property
    def t_max(self) -> float:
        return self.pieces[-1].t_high

    def check_range(self, temperature: ArrayLike) -> np.ndarray:
        t = np.asarray(temperature, dtype=float)
        bad = ~((t >= self.t_min) & (t <= self.t_max))
        if np.any(bad):
            raise PropertyRangeError(self.name, t[bad].flat[0], (self.t_min, self.t_max))
        return t

    def molar_enthalpy(self, temperature: ArrayLike) -> ArrayLike:
        t = self.check_range(temperature)
        k = np.searchsorted(self._bounds, t, side="right")
        a = self._cp[k].T
        return self._h_poly(a, t) + self._h0[k]

    def molar_heat_capacity(self, temperature: ArrayLike) -> ArrayLike:
        t = self.check_range(temperature)
        k = np.searchsorted(self._bounds, t, side="right")
        return self._cp_poly(self._cp[k].T, t)


def eval_enthalpy(species: Species, temperature: ArrayLike) -> ArrayLike:
    """Specific enthalpy in J/kg (formation enthalpy included)"""
    return species.molar_enthalpy(temperature) / species.molar_mass


def eval_heat_capacity(species: Species, temperature: ArrayLike) -> ArrayLike:
    """Specific isobaric heat capacity in J/(kg K)"""
    return species.molar_heat_capacity(temperature) / species.molar_mass


def common_range(species: Sequence[Species]) -> tuple:
    lo = max(s.t_min for s in species)
    hi = min(s.t_max for s in species)
    return lo, hi


def mixture_enthalpy(species: Sequence[Species], fractions: np.ndarray, temperature: ArrayLike) -> np.ndarray:
    """Mass-weighted specific enthalpy; fractions has shape (m, len(species))"""
    fractions = np.atleast_2d(fractions)
    t = np.broadcast_to(np.asarray(temperature, dtype=float), fractions.shape[:1])
    total = np.zeros(fractions.shape[0])
    for i, sp in enumerate(species):
        w = fractions[:, i]
        if np.any(w != 0.0):
            total = total + w * eval_enthalpy(sp, t)
    return total


def mixture_heat_capacity(species: Sequence[Species], fractions: np.ndarray, temperature: ArrayLike) -> np.ndarray:
    fractions = np.atleast_2d(fractions)
    t = np.broadcast_to(np.asarray(temperature, dtype=float), fractions.shape[:1])
    total = np.zeros(fractions.shape[0])
    for i, sp in enumerate(species):
        w = fractions[:, i]
        if np.any(w != 0.0):
            total = total + w * eval_heat_capacity(sp, t)
    return total


def temperature_from_enthalpy(
    species: Sequence[Species],
    fractions: np.ndarray,
    enthalpy: ArrayLike,
    t_guess: ArrayLike,
    rtol: float = 1e-8,
    max_iter: int = 100,
) -> np.ndarray:
    """
    Invert h = sum_i w_i h_i(T) for T by Newton iteration, safeguarded with bisection.

    fractions are weights (mass fractions or masses); enthalpy is in the same
    weighting, e.g. J/kg with mass fractions or J with masses in kg.
    """
    fractions = np.atleast_2d(np.asarray(fractions, dtype=float))
    target = np.atleast_1d(np.asarray(enthalpy, dtype=float))
    active = [sp for i, sp in enumerate(species) if np.any(fractions[:, i] != 0.0)]
    if not active:
        raise ConfigurationError("temperature inversion requested for an empty mixture")
    lo_t, hi_t = common_range(active)
    if lo_t >= hi_t:
        raise ConfigurationError(
            "species validity ranges do not overlap: " + ", ".join(s.name for s in active)
        )
    n = target.shape[0]
    lo = np.full(n, lo_t)
    hi = np.full(n, hi_t)
    f_lo = mixture_enthalpy(species, fractions, lo) - target
    f_hi = mixture_enthalpy(species, fractions, hi) - target
    outside = (f_lo > 0.0) | (f_hi < 0.0)
    if np.any(outside):
        i = int(np.argmax(outside))
        bound_t = lo_t if f_lo[i] > 0.0 else hi_t
        name = active[0].name if len(active) == 1 else "+".join(s.name for s in active)
        raise PropertyRangeError(name, bound_t, (lo_t, hi_t))

    t = np.clip(np.broadcast_to(np.asarray(t_guess, dtype=float), (n,)).copy(), lo_t, hi_t)
    for _ in range(max_iter):
        f = mixture_enthalpy(species, fractions, t) - target
        df = mixture_heat_capacity(species, fractions, t)
        above = f > 0.0
        hi = np.where(above, t, hi)
        lo = np.where(above, lo, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_new = t - f / df
        bisect = ~np.isfinite(t_new) | (t_new <= lo) | (t_new >= hi)
        t_new = np.where(bisect, 0.5 * (lo + hi), t_new)
        done = np.abs(t_new - t) <= rtol * np.abs(t_new)
        t = t_new
        if np.all(done):
            return t
    raise PropertyRangeError("+".join(s.name for s in active), float(t[0]), (lo_t, hi_t))


def ideal_gas_density(pressure: ArrayLike, temperature: ArrayLike, molar_mass: ArrayLike) -> ArrayLike:
    return np.asarray(pressure) * np.asarray(molar_mass) / (R_GAS * np.asarray(temperature))


def saturation_temperature(pressure: float) -> float:
    """Water boiling point from Clausius-Clapeyron about the normal boiling point"""
    if pressure <= 0.0:
        raise ConfigurationError(f"saturation pressure must be positive, got {pressure}")
    inv_t = 1.0 / 373.15 - R_GAS / H_VAP_WATER * math.log(pressure / P_REF)
    return 1.0 / inv_t


class Material(BaseModel):
    """Bulk particle material"""

    model_config = ConfigDict(extra="forbid")

    name: str
    intrinsic_density: float = Field(gt=0.0)
    conductivity: float = Field(gt=0.0)
    porosity: float = Field(ge=0.0, lt=1.0)
    permeability: float = Field(gt=0.0)
    emissivity: float = Field(default=1.0, gt=0.0, le=1.0)
    melt_temperature: Optional[float] = Field(default=None, gt=0.0)
    latent_heat_fusion: float = Field(default=0.0, ge=0.0)
    melt_species: Optional[str] = None
    melt_product: Optional[str] = None
    gas_viscosity: float = Field(default=2.0e-5, gt=0.0)
    gas_conductivity: float = Field(default=0.03, gt=0.0)
    gas_diffusivity: float = Field(default=2.0e-5, gt=0.0)

    @model_validator(mode="after")
    def _melting_fields(self):
        if self.melt_temperature is not None and self.melt_species is None:
            raise ValueError("melt_temperature given without melt_species")
        return self

    @property
    def melts(self) -> bool:
        return self.melt_temperature is not None


class PropertyDatabase(BaseModel):
    """All species and materials known to a run"""

    model_config = ConfigDict(extra="forbid")

    species: Dict[str, Species] = Field(default_factory=dict)
    materials: Dict[str, Material] = Field(default_factory=dict)

    def get_species(self, name: str) -> Species:
        try:
            return self.species[name]
        except KeyError:
            raise ConfigurationError(
                f"unknown species '{name}'; available species: {', '.join(sorted(self.species))}"
            ) from None

    def get_material(self, name: str) -> Material:
        try:
            return self.materials[name]
        except KeyError:
            raise ConfigurationError(
                f"unknown material '{name}'; available materials: {', '.join(sorted(self.materials))}"
            ) from None

    def resolve(self, names: Sequence[str]) -> List[Species]:
        return [self.get_species(n) for n in names]


def _records_to_database(raw: dict, source: str) -> PropertyDatabase:
    if not isinstance(raw, dict):
        raise ConfigurationError("database root must be a mapping", source=source)
    unknown = set(raw) - {"species", "materials"}
    if unknown:
        raise ConfigurationError([f"unknown key '{k}'" for k in sorted(unknown)], source=source)
    violations = []
    species: Dict[str, Species] = {}
    materials: Dict[str, Material] = {}
    for i, record in enumerate(raw.get("species") or []):
        try:
            sp = Species.model_validate(record)
            species[sp.name] = sp
        except ValidationError as exc:
            violations.extend(_format_validation(exc, f"species[{i}]"))
        except ValueError as exc:
            violations.append(f"species[{i}]: {exc}")
    for i, record in enumerate(raw.get("materials") or []):
        try:
            mat = Material.model_validate(record)
            materials[mat.name] = mat
        except ValidationError as exc:
            violations.extend(_format_validation(exc, f"materials[{i}]"))
    if violations:
        raise ConfigurationError(violations, source=source)
    return PropertyDatabase(species=species, materials=materials)


def _format_validation(exc: ValidationError, prefix: str) -> List[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        out.append(f"{prefix}.{loc}: {err['msg']}" if loc else f"{prefix}: {err['msg']}")
    return out


@cached(cache=LRUCache(maxsize=16), key=lambda path=None: str(Path(path or DEFAULT_DATABASE).resolve()))
def load_species_database(path: Optional[Union[str, Path]] = None) -> PropertyDatabase:
    """Load and validate a species/material database file"""
    path = Path(path or DEFAULT_DATABASE)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigurationError(f"syntax error{where}: {exc}", source=str(path)) from exc
    except OSError as exc:
        raise ConfigurationError(f"cannot read database: {exc}", source=str(path)) from exc
    db = _records_to_database(raw, str(path))
    logger.debug(f"Loaded {len(db.species)} species and {len(db.materials)} materials from {path}")
    return db


def dump_species(species: Species) -> str:
    """Serialize a species record to YAML text"""
    return yaml.safe_dump(species.model_dump(exclude_none=True), sort_keys=False)


def load_species(text: str) -> Species:
    try:
        return Species.model_validate(yaml.safe_load(text))
    except ValidationError as exc:
        raise ConfigurationError(_format_validation(exc, "species")) from exc
    except ValueError as exc:
        raise ConfigurationError(f"species: {exc}") from exc
