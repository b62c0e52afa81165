"""
Scenario files: YAML parsed into strict pydantic models, then checked against
the species database and mechanism file so every violation is reported at once.
"""

import copy
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError
from .fluid_continuum import FACES
from .kinetics import available_mechanisms
from .properties import PropertyDatabase, load_species_database

CATALOG_DIR = Path(__file__).parent / "catalog"

Vector = Tuple[float, float, float]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(StrictModel):
    lo: Vector = (0.0, 0.0, 0.0)
    hi: Vector
    counts: Tuple[int, int, int]

    @model_validator(mode="after")
    def _check(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("hi must exceed lo on every axis")
        if any(c < 1 for c in self.counts):
            raise ValueError("counts must be >= 1")
        return self


class BoundaryConfig(StrictModel):
    kind: Literal["wall", "periodic", "inlet", "outlet"] = "wall"
    inflow: Dict[str, float] = Field(default_factory=dict)
    temperature: Optional[float] = Field(default=None, gt=0.0)
    composition: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    pressure: float = 0.0


class PhaseConfig(StrictModel):
    name: str
    composition: Dict[str, float]
    density: float = Field(gt=0.0)
    viscosity: float = Field(gt=0.0)
    conductivity: float = Field(gt=0.0)
    temperature: float = Field(gt=0.0)
    fraction: float = Field(default=0.0, ge=0.0, lt=1.0)
    diffusivity: float = Field(default=0.0, ge=0.0)

    @field_validator("composition")
    @classmethod
    def _sums_to_one(cls, value):
        if abs(sum(value.values()) - 1.0) > 1e-9:
            raise ValueError(f"mass fractions must sum to 1, got {sum(value.values())}")
        return value


class AmbientConfig(StrictModel):
    """Fixed surroundings for single-particle runs"""

    temperature: float = Field(gt=0.0)
    velocity: float = Field(default=0.0, ge=0.0)
    pressure: float = Field(default=101325.0, gt=0.0)
    composition: Dict[str, float]
    density: Optional[float] = Field(default=None, gt=0.0)
    viscosity: float = Field(gt=0.0)
    conductivity: float = Field(gt=0.0)
    diffusivity: float = Field(default=0.0, ge=0.0)


class SubgridConfig(StrictModel):
    mode: Literal["off", "prescribed", "smagorinsky"] = "off"
    k: float = Field(default=0.0, ge=0.0)


class FluidConfig(StrictModel):
    mode: Literal["ambient", "coupled"] = "coupled"
    ambient: Optional[AmbientConfig] = None
    grid: Optional[GridConfig] = None
    phases: List[PhaseConfig] = Field(default_factory=list)
    boundaries: Dict[str, BoundaryConfig] = Field(default_factory=dict)
    carrier: Optional[str] = None
    drag: Literal["ergun-wen-yu", "single-sphere"] = "ergun-wen-yu"
    subgrid: SubgridConfig = Field(default_factory=SubgridConfig)
    energy: bool = True
    gravity: Vector = (0.0, 0.0, -9.81)

    @model_validator(mode="after")
    def _mode_fields(self):
        if self.mode == "ambient" and self.ambient is None:
            raise ValueError("ambient mode needs an 'ambient' block")
        if self.mode == "coupled":
            if self.grid is None:
                raise ValueError("coupled mode needs a 'grid' block")
            if not self.phases:
                raise ValueError("coupled mode needs at least one phase")
        unknown = set(self.boundaries) - set(FACES)
        if unknown:
            raise ValueError(f"unknown boundary faces {sorted(unknown)}; faces are {list(FACES)}")
        return self


class PackingConfig(StrictModel):
    kind: Literal["explicit", "lattice", "random"] = "explicit"
    positions: List[Vector] = Field(default_factory=list)
    origin: Vector = (0.0, 0.0, 0.0)
    counts: Tuple[int, int, int] = (1, 1, 1)
    spacing: Optional[float] = Field(default=None, gt=0.0)
    jitter: float = Field(default=0.0, ge=0.0)
    count: int = Field(default=0, ge=0)
    region_lo: Vector = (0.0, 0.0, 0.0)
    region_hi: Vector = (1.0, 1.0, 1.0)
    max_attempts: int = Field(default=100_000, gt=0)


class BedConfig(StrictModel):
    """Powder bed lumped into a particle set: the bed mass weights the released gas"""

    mass: float = Field(gt=0.0)  # kg of solid
    height: float = Field(gt=0.0)
    voidage: float = Field(default=0.4, ge=0.0, lt=1.0)
    gas_flow: float = Field(gt=0.0)  # Nm3/s through the bed
    surface_scale: float = Field(default=1.0, gt=0.0)


class ParticleSetConfig(StrictModel):
    name: str
    material: str
    composition: Dict[str, float]
    radius: float = Field(gt=0.0)
    nodes: int = Field(default=11, ge=3)
    geometry: Literal["plate", "cylinder", "sphere"] = "sphere"
    temperature: float = Field(gt=0.0)
    gas_composition: Dict[str, float] = Field(default_factory=dict)
    pressure: float = Field(default=101325.0, gt=0.0)
    mechanisms: List[str] = Field(default_factory=list)
    threshold: Optional[Union[float, Literal["saturation"]]] = None
    thermal: bool = True
    fixed: bool = False
    count: int = Field(default=1, ge=1)
    velocity: Vector = (0.0, 0.0, 0.0)
    packing: PackingConfig = Field(default_factory=PackingConfig)
    bed: Optional[BedConfig] = None

    @field_validator("composition")
    @classmethod
    def _sums_to_one(cls, value):
        if abs(sum(value.values()) - 1.0) > 1e-9:
            raise ValueError(f"mass fractions must sum to 1, got {sum(value.values())}")
        return value


class ContactConfig(StrictModel):
    stiffness: float = Field(default=1.0e3, gt=0.0)
    restitution: float = Field(default=0.5, gt=0.0, le=1.0)
    tangential_stiffness: float = Field(default=0.0, ge=0.0)
    friction: float = Field(default=0.0, ge=0.0)
    model: Literal["linear", "hertz"] = "linear"
    cutoff_factor: float = Field(default=1.5, ge=1.0)


class NumericsConfig(StrictModel):
    dt: float = Field(gt=0.0)
    t_end: float = Field(gt=0.0)
    cfl: float = Field(default=0.9, gt=0.0, le=1.0)
    output_every: int = Field(default=100, ge=1)
    seed: int = 12345
    reaction_substeps: int = Field(default=4, ge=1)
    porosity_samples: int = Field(default=10_000, ge=100)
    pressure_tolerance: float = Field(default=1e-10, gt=0.0)

    @model_validator(mode="after")
    def _end_after_step(self):
        if self.t_end < self.dt:
            raise ValueError(f"t_end ({self.t_end}) must be >= dt ({self.dt})")
        return self


class SweepConfig(StrictModel):
    key: str
    values: List[float] = Field(min_length=1)


class OutputConfig(StrictModel):
    fields: bool = False
    snapshots: bool = False


class ColumnConfig(StrictModel):
    """Optional fluid kinetic-energy diagnostics for a draining column"""

    inlet_area: float = Field(gt=0.0)
    density: float = Field(gt=0.0)
    z_low: float
    z_high: float
    a: float = Field(gt=0.0)


class ScenarioConfig(StrictModel):
    name: str
    description: str = ""
    fluid: FluidConfig
    particles: List[ParticleSetConfig] = Field(default_factory=list)
    contact: ContactConfig = Field(default_factory=ContactConfig)
    numerics: NumericsConfig
    sweep: Optional[SweepConfig] = None
    output: OutputConfig = Field(default_factory=OutputConfig)
    analysis: List[Literal["melt", "drying", "reduction", "trickle"]] = Field(default_factory=list)
    reference: Dict[str, float] = Field(default_factory=dict)
    column: Optional[ColumnConfig] = None

    @model_validator(mode="after")
    def _ambient_particles(self):
        if self.fluid.mode == "ambient" and not self.particles:
            raise ValueError("ambient mode needs at least one particle set")
        if self.fluid.mode == "coupled" and any(ps.bed is not None for ps in self.particles):
            raise ValueError("particle set bed weighting applies to ambient mode only")
        return self


# -- parsing -------------------------------------------------------------------------


def _format_validation(exc: ValidationError) -> List[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        out.append(f"{loc}: {err['msg']}" if loc else err["msg"])
    return out


def _load_yaml(text: str, source: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        if mark is not None:
            raise ConfigurationError(
                f"YAML syntax error at line {mark.line + 1}, column {mark.column + 1}: {problem}", source=source
            ) from exc
        raise ConfigurationError(f"YAML syntax error: {problem}", source=source) from exc


def check_references(config: ScenarioConfig, database: PropertyDatabase) -> List[str]:
    """Every species, material, mechanism and phase a scenario names must exist"""
    violations = []
    known = set(database.species)
    listing = ", ".join(sorted(known))

    def species(names, where):
        for n in names:
            if n not in known:
                violations.append(f"{where}: unknown species '{n}'; available species: {listing}")

    phase_names = [p.name for p in config.fluid.phases]
    for i, phase in enumerate(config.fluid.phases):
        species(phase.composition, f"fluid.phases.{i}.composition")
    if len(set(phase_names)) != len(phase_names):
        violations.append("fluid.phases: phase names must be unique")
    if config.fluid.carrier is not None and config.fluid.mode == "coupled" and config.fluid.carrier not in phase_names:
        violations.append(f"fluid.carrier: unknown phase '{config.fluid.carrier}'; phases: {', '.join(phase_names)}")
    for face, bc in config.fluid.boundaries.items():
        for phase in list(bc.inflow) + list(bc.composition):
            if phase not in phase_names:
                violations.append(f"fluid.boundaries.{face}: unknown phase '{phase}'")
        for phase, comp in bc.composition.items():
            species(comp, f"fluid.boundaries.{face}.composition.{phase}")
    if config.fluid.ambient is not None:
        species(config.fluid.ambient.composition, "fluid.ambient.composition")

    mechanisms = available_mechanisms()
    names = set()
    for i, ps in enumerate(config.particles):
        where = f"particles.{i}"
        if ps.name in names:
            violations.append(f"{where}.name: duplicate particle set '{ps.name}'")
        names.add(ps.name)
        if ps.material not in database.materials:
            violations.append(
                f"{where}.material: unknown material '{ps.material}'; "
                f"available materials: {', '.join(sorted(database.materials))}"
            )
        species(ps.composition, f"{where}.composition")
        species(ps.gas_composition, f"{where}.gas_composition")
        for m in ps.mechanisms:
            if m not in mechanisms:
                violations.append(f"{where}.mechanisms: unknown mechanism '{m}'; available: {', '.join(mechanisms)}")
        if config.fluid.mode == "coupled" and ps.thermal and ps.geometry != "sphere":
            violations.append(f"{where}.geometry: coupled particles must be spheres")
        if ps.packing.kind == "explicit" and not ps.packing.positions and config.fluid.mode == "coupled":
            violations.append(f"{where}.packing.positions: explicit packing needs positions")
        if ps.packing.kind == "lattice" and ps.packing.spacing is None:
            violations.append(f"{where}.packing.spacing: lattice packing needs a spacing")
    if config.sweep is not None:
        try:
            get_path(config.model_dump(mode="json", by_alias=True), config.sweep.key)
        except KeyError:
            violations.append(f"sweep.key: '{config.sweep.key}' does not name a configuration value")
    return violations


def validate_config(raw: Any, source: str = "<config>", database: Optional[PropertyDatabase] = None) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("scenario file must contain a mapping at top level", source=source)
    try:
        config = ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(_format_validation(exc), source=source) from exc
    violations = check_references(config, database or load_species_database())
    if violations:
        raise ConfigurationError(violations, source=source)
    return config


def parse_config(path: Union[str, Path], database: Optional[PropertyDatabase] = None) -> ScenarioConfig:
    """Read and fully validate a scenario file"""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read scenario file: {exc}", source=str(path)) from exc
    return validate_config(_load_yaml(text, str(path)), str(path), database)


def parse_config_text(text: str, source: str = "<text>", database: Optional[PropertyDatabase] = None) -> ScenarioConfig:
    return validate_config(_load_yaml(text, source), source, database)


def dump_config(config: ScenarioConfig) -> str:
    data = config.model_dump(mode="json")
    return yaml.dump(data, default_flow_style=False, indent=2, sort_keys=False)


# -- catalog and overrides -------------------------------------------------------------


def catalog_names() -> List[str]:
    return sorted(p.stem for p in CATALOG_DIR.glob("*.yaml"))


def resolve_scenario(name_or_path: Union[str, Path]) -> Path:
    candidate = Path(name_or_path)
    if candidate.suffix in (".yaml", ".yml") and candidate.exists():
        return candidate
    entry = CATALOG_DIR / f"{name_or_path}.yaml"
    if entry.exists():
        return entry
    raise ConfigurationError(
        f"unknown scenario '{name_or_path}'; catalog entries: {', '.join(catalog_names())}"
    )


def get_path(data: dict, dotted: str) -> Any:
    node = data
    for part in dotted.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        elif isinstance(node, dict) and part in node:
            node = node[part]
        else:
            raise KeyError(dotted)
    return node


def set_path(data: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        node = node[int(part)] if isinstance(node, list) else node.setdefault(part, {})
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def apply_overrides(config: ScenarioConfig, overrides: Dict[str, Any]) -> ScenarioConfig:
    """Dotted-key overrides, re-validated; e.g. {'numerics.dt': 0.01}"""
    if not overrides:
        return config
    data = copy.deepcopy(config.model_dump(mode="json"))
    for key, value in overrides.items():
        if value is not None:
            set_path(data, key, value)
    return validate_config(data, source="overrides")
