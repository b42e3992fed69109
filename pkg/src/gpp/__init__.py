"""Graph-based multi-echelon supply planning with offline actor-critic learning."""

__version__ = "0.1.0"
