"""BFGS / L-BFGS toolkit with displacement aggregation.

Exact limited-memory quasi-Newton updates: when a new iterate displacement
is linearly dependent on the stored ones, the stored gradient displacements
are modified ("aggregated") so that dropping a pair changes nothing about
the resulting BFGS matrix.
"""

__version__ = "0.1.0"
