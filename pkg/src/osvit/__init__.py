"""Volumetric vision-transformer survival-class prediction, from scratch on numpy."""

__version__ = "0.1.0"
