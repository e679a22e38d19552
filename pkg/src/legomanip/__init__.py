"""Seeded simulator and CMA-ES learner for insert-and-twist Lego manipulation."""

__version__ = "0.1.0"
