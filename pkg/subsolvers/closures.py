"""
Empirical closures: interphase drag and film transfer correlations
"""

import math

import numpy as np

from .errors import ConfigurationError

ERGUN_VISCOUS = 150.0
ERGUN_INERTIAL = 1.75
BLEND_POROSITY = 0.8


def sphere_drag_coefficient(reynolds):
    """Schiller-Naumann, constant 0.44 above Re = 1000"""
    re = np.maximum(np.asarray(reynolds, dtype=float), 1e-12)
    return np.where(re < 1000.0, 24.0 / re * (1.0 + 0.15 * re ** 0.687), 0.44)


def drag_coefficient(phase_fraction, porosity, density, viscosity, diameter, slip):
    """
    Volumetric drag coefficient K (N s/m4) between one fluid phase and the solid,
    so the force per unit volume on the fluid is -K (u_fluid - u_solid).

    Ergun in dense regions, Wen-Yu with Schiller-Naumann in dilute ones, blended
    smoothly around porosity 0.8.
    """
    eps_k = np.maximum(np.asarray(phase_fraction, dtype=float), 1e-6)
    eps = np.clip(np.asarray(porosity, dtype=float), 1e-6, 1.0)
    solid = 1.0 - eps
    slip = np.abs(np.asarray(slip, dtype=float))
    d = np.asarray(diameter, dtype=float)
    ergun = ERGUN_VISCOUS * viscosity * solid ** 2 / (eps_k * d ** 2) + ERGUN_INERTIAL * density * solid * slip / d
    reynolds = eps_k * density * slip * d / viscosity
    cd_re = np.where(reynolds < 1000.0, 24.0 * (1.0 + 0.15 * reynolds ** 0.687), 0.44 * reynolds)
    wen_yu = 0.75 * cd_re * viscosity * solid * eps ** -2.65 / d ** 2
    blend = 0.5 + np.arctan(ERGUN_VISCOUS * ERGUN_INERTIAL * (eps - BLEND_POROSITY)) / math.pi
    return np.where(solid > 0.0, (1.0 - blend) * ergun + blend * wen_yu, 0.0)


def particle_drag_coefficient(phase_fraction, porosity, density, viscosity, diameter, slip):
    """Per-particle share beta_p = K V_p / (1 - eps), in N s/m"""
    k = drag_coefficient(phase_fraction, porosity, density, viscosity, diameter, slip)
    solid = np.maximum(1.0 - np.asarray(porosity, dtype=float), 1e-12)
    volume = math.pi / 6.0 * np.asarray(diameter, dtype=float) ** 3
    return k * volume / solid


def nusselt(reynolds, prandtl):
    """Ranz-Marshall"""
    return 2.0 + 0.6 * np.sqrt(np.maximum(reynolds, 0.0)) * np.cbrt(prandtl)


def sherwood(reynolds, schmidt):
    return 2.0 + 0.6 * np.sqrt(np.maximum(reynolds, 0.0)) * np.cbrt(schmidt)


def check_positive(**values) -> None:
    bad = [f"{k} must be positive, got {v}" for k, v in values.items() if np.any(np.asarray(v) <= 0.0)]
    if bad:
        raise ConfigurationError(bad, source="transfer properties")
