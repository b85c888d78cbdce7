"""Three-scale homogenization toolkit for transient nonlinear thermo-mechanical composites."""

__version__ = "0.1.0"
