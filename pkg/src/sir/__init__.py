"""Spectrum intelligence simulation toolkit.

Subpackages cover the radio environment (rfenv), blind multi-level sensing
(perception), collaborative spectrum mapping (mapping), learning-based
multichannel access (access) and the benchmark harness (bench, cli).
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    access,
    bench,
    config,
    geometry,
    gpq,
    mapping,
    perception,
    qnet,
    rfenv,
    svg,
)
