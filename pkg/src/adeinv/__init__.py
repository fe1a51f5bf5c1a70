"""Joint source inversion and parameter estimation for advection-diffusion
equations with kernel-weighted physics-informed networks."""

__version__ = "0.1.0"
