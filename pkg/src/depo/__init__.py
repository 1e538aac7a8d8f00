"""Data-dependent elliptical exploration for online preference optimization, simulated."""
__version__ = "0.1.0"
