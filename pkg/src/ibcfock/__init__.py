"""Interior-boundary-condition Hamiltonians on truncated momentum-space Fock spaces."""

__version__ = "0.1.0"
