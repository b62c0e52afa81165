"""
Post-processing: drying-curve analysis and plot-ready CSV plus gnuplot scripts
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import yaml
from jinja2 import Environment, StrictUndefined
from scipy.ndimage import uniform_filter1d

from .errors import PlotInputError

logger = logging.getLogger("thermodem.plots")

WARMING = "warming-up"
CONSTANT = "constant-rate"
FALLING = "falling-rate"

FIGURES = {
    "pressure_drop_vs_velocity": ("liquid superficial velocity (m/s)", "pressure drop (Pa/m)", "value", "pressure_drop"),
    "holdup_vs_velocity": ("liquid superficial velocity (m/s)", "liquid holdup (-)", "value", "holdup"),
    "radius_vs_time": ("time (s)", "radius (m)", "time", "radius"),
    "drying_rate_vs_time": ("time (s)", "drying rate (kg/s)", "time", "rate"),
    "h2o_fraction_vs_time": ("time (s)", "H2O mass fraction in outlet gas (-)", "time", "h2o_fraction"),
}

_GNUPLOT = Environment(undefined=StrictUndefined, trim_blocks=True, lstrip_blocks=True).from_string(
    """# {{ title }}
set datafile separator ","
set key autotitle columnhead
set xlabel "{{ xlabel }}"
set ylabel "{{ ylabel }}"
set grid
set terminal pngcairo size 900,600
set output "{{ name }}.png"
{% if points %}
plot "{{ data }}" using "{{ x }}":"{{ y }}" with linespoints pt 7 title "{{ label }}"
{% else %}
plot "{{ data }}" using "{{ x }}":"{{ y }}" with lines lw 2 title "{{ label }}"
{% endif %}
"""
)


@dataclass
class DryingPhase:
    label: str
    start: float
    end: float


def classify_drying_phases(
    times: Sequence[float],
    rates: Sequence[float],
    window: int = 9,
    tolerance: float = 0.3,
    low_fraction: float = 0.1,
) -> List[DryingPhase]:
    """
    Split a drying-rate curve by the sign of the derivative of the smoothed rate.

    The slope is made dimensionless with the peak rate and the curve duration;
    |slope| below tolerance counts as flat. Flat stretches below low_fraction of
    the peak belong to the warming-up before the peak and to the falling rate after it.
    """
    t = np.asarray(times, dtype=float)
    r = np.asarray(rates, dtype=float)
    if t.size < 3 or t.size != r.size:
        return []
    smooth = uniform_filter1d(r, size=max(1, min(window, t.size)), mode="nearest")
    peak = float(np.max(np.abs(smooth)))
    duration = float(t[-1] - t[0])
    if peak <= 0.0 or duration <= 0.0:
        return []
    slope = np.gradient(smooth, t) * duration / peak
    labels = np.where(slope > tolerance, 1, np.where(slope < -tolerance, -1, 0))
    peak_index = int(np.argmax(smooth))
    idx = np.arange(t.size)
    low = (labels == 0) & (smooth < low_fraction * peak)
    labels = np.where(low & (idx <= peak_index), 1, labels)
    labels = np.where(low & (idx > peak_index), -1, labels)
    names = {1: WARMING, 0: CONSTANT, -1: FALLING}

    phases: List[DryingPhase] = []
    start = 0
    for k in range(1, t.size + 1):
        if k == t.size or labels[k] != labels[start]:
            label = names[int(labels[start])]
            end = t[k] if k < t.size else t[-1]
            if phases and phases[-1].label == label:
                phases[-1].end = float(end)
            else:
                phases.append(DryingPhase(label, float(t[start]), float(end)))
            start = k
    # short blips shorter than a smoothing window are merged into the previous phase
    min_length = window * (duration / max(t.size - 1, 1))
    merged: List[DryingPhase] = []
    for ph in phases:
        if merged and (ph.end - ph.start) < min_length:
            merged[-1].end = ph.end
        elif merged and merged[-1].label == ph.label:
            merged[-1].end = ph.end
        else:
            merged.append(ph)
    return merged


def phase_sequence(phases: Sequence[DryingPhase]) -> List[str]:
    return [p.label for p in phases]


def plateau_exit_time(times, surface_temperature, saturation: float, margin: float = 2.0) -> Optional[float]:
    """First time the surface leaves the saturation plateau, after having reached it"""
    t = np.asarray(times, dtype=float)
    temp = np.asarray(surface_temperature, dtype=float)
    reached = np.flatnonzero(temp >= saturation - 0.5)
    if reached.size == 0:
        return None
    after = np.flatnonzero(temp[reached[0]:] > saturation + margin)
    if after.size == 0:
        return None
    return float(t[reached[0] + after[0]])


# -- plot emission -----------------------------------------------------------------


def _read_csv(path: Path) -> Dict[str, np.ndarray]:
    with open(path) as handle:
        header = handle.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {name: data[:, i] for i, name in enumerate(header)}


def emit_plots(run_dir: Union[str, Path]) -> List[Path]:
    """
    Write <figure>.csv and <figure>.gp for every series the run summary lists.
    Raises PlotInputError naming whatever is missing.
    """
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.yaml"
    if not summary_path.exists():
        raise PlotInputError(["summary.yaml"], str(run_dir))
    summary = yaml.safe_load(summary_path.read_text()) or {}
    series = {k[len("series."):]: v for k, v in summary.items() if k.startswith("series.")}
    if not series:
        raise PlotInputError(["series.* entries in summary.yaml"], str(run_dir))
    missing = [v for v in series.values() if not (run_dir / v).exists()]
    if missing:
        raise PlotInputError(sorted(set(missing)), str(run_dir))

    written: List[Path] = []
    for key, filename in sorted(series.items()):
        figure = key.split(".")[0]
        if figure not in FIGURES:
            logger.warning(f"No figure template for series '{key}'")
            continue
        xlabel, ylabel, x, y = FIGURES[figure]
        columns = _read_csv(run_dir / filename)
        absent = [c for c in (x, y) if c not in columns]
        if absent:
            raise PlotInputError([f"{filename}:{c}" for c in absent], str(run_dir))
        name = key.replace(".", "_")
        order = np.argsort(columns[x], kind="stable")
        keep = [x, y] + [c for c in columns if c not in (x, y)]
        table = np.column_stack([columns[c][order] for c in keep])
        csv_path = run_dir / f"{name}.csv"
        np.savetxt(csv_path, table, delimiter=",", header=",".join(keep), comments="", fmt="%.10g")
        script = _GNUPLOT.render(
            title=f"{summary.get('scenario', '')} {name}".strip(),
            xlabel=xlabel,
            ylabel=ylabel,
            name=name,
            data=csv_path.name,
            x=x,
            y=y,
            label=key,
            points=figure.endswith("velocity"),
        )
        gp_path = run_dir / f"{name}.gp"
        gp_path.write_text(script)
        written.extend([csv_path, gp_path])
        logger.info(f"Wrote {csv_path.name} and {gp_path.name}")
    return written
