"""Learning port-Hamiltonian rigid-body dynamics on matrix Lie groups."""

__version__ = "0.1.0"
