"""Desk-scale numerical lab for a renormalized 2-D lattice Bose gas with a
fractional-Bessel pair interaction, and its classical-field limit."""

from .lattice import (
    CertifiedValue,
    KernelParams,
    ModeSet,
    dispersion,
    kernel_coeff,
    mode_set,
)

__all__ = [
    "CertifiedValue",
    "KernelParams",
    "ModeSet",
    "dispersion",
    "kernel_coeff",
    "mode_set",
]

__version__ = "0.1.0"
