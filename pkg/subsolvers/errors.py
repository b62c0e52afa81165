"""
Exception hierarchy shared by every solver module
"""

from typing import List, Optional, Sequence


# CLI exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3


class EngineError(Exception):
    """Base class for all engine failures"""

    exit_code = EXIT_RUNTIME_ERROR


class ConfigurationError(EngineError):
    """Invalid input: carries every violation found, not just the first"""

    exit_code = EXIT_CONFIG_ERROR

    def __init__(self, violations, source: Optional[str] = None):
        if isinstance(violations, str):
            violations = [violations]
        self.violations: List[str] = list(violations)
        self.source = source
        prefix = f"{source}: " if source else ""
        super().__init__(prefix + "; ".join(self.violations))


class PropertyRangeError(EngineError):
    """Temperature outside a species' polynomial validity range"""

    def __init__(self, species: str, temperature: float, bounds: Sequence[float]):
        self.species = species
        self.temperature = float(temperature)
        self.bounds = (float(bounds[0]), float(bounds[1]))
        super().__init__(
            f"temperature {self.temperature:.6g} K outside validity range "
            f"[{self.bounds[0]:.6g}, {self.bounds[1]:.6g}] K of species '{species}'"
        )


class StepError(EngineError):
    """A time step could not be completed"""

    def __init__(
        self,
        message: str,
        module: str = "",
        field: Optional[str] = None,
        index: Optional[int] = None,
    ):
        self.module = module
        self.field = field
        self.index = index
        where = []
        if module:
            where.append(module)
        if field is not None:
            where.append(f"field={field}")
        if index is not None:
            where.append(f"index={index}")
        suffix = f" [{', '.join(where)}]" if where else ""
        super().__init__(message + suffix)


class GeometryError(EngineError):
    """Degenerate geometry, e.g. coincident particle centres"""


class CouplingError(EngineError):
    """Particle cannot be coupled to the fluid grid"""

    def __init__(self, message: str, particle_id: Optional[int] = None):
        self.particle_id = particle_id
        suffix = f" (particle {particle_id})" if particle_id is not None else ""
        super().__init__(message + suffix)


class PlotInputError(EngineError):
    """A series required for a plot is missing"""

    def __init__(self, missing: Sequence[str], directory: str = ""):
        self.missing = list(missing)
        super().__init__(
            f"missing series in {directory or 'run directory'}: {', '.join(self.missing)}"
        )
