"""Unit conversions.

Internally every frequency is an angular frequency in rad/us and every rate
is in 1/us. Config files carry ordinary frequencies in MHz and rates in 1/ns,
1/us or 1/s, labelled in the key name.
"""

import math

TWO_PI = 2.0 * math.pi


def mhz(value):
    """Ordinary frequency in MHz -> angular frequency in rad/us."""
    return TWO_PI * value


def to_mhz(omega):
    """Angular frequency in rad/us -> ordinary frequency in MHz."""
    return omega / TWO_PI


def per_ns(rate):
    """Rate in 1/ns -> 1/us."""
    return 1e3 * rate


def per_s(rate):
    """Rate in 1/s -> 1/us."""
    return 1e-6 * rate
