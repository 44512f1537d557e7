"""Hyperfine-induced nuclear spin dynamics from damped, driven electrons."""

__version__ = "0.1.0"
