"""Task placement over COIN nodes and an MEC server: exact solver, learned policies, evaluation."""

__version__ = "0.1.0"
