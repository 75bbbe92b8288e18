"""Klein-Gordon field coupled to a scalar-charged relativistic particle.

Solvers for the coupled field and worldline, the discrete concatenated
action with a finite-difference variational oracle, and stress-energy
audits. See the README for an overview.
"""

__version__ = "0.1.0"
