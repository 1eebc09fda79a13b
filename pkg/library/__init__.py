"""Single-pixel DVS simulator: circuit model, noise synthesis and event generation."""

from . import (
    circuit,
    config,
    discretize,
    events,
    experiments,
    fitting,
    fpt,
    io,
    noise,
    simulation,
    validators,
)

__all__ = [
    "circuit",
    "config",
    "discretize",
    "events",
    "experiments",
    "fitting",
    "fpt",
    "io",
    "noise",
    "simulation",
    "validators",
]
