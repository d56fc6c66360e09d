"""Versioned simulator defaults.

Bump ``DEFAULTS_VERSION`` whenever any value below changes so stored fits and
distributions can be traced to the parameter set they were built against.
"""
import math

DEFAULTS_VERSION = 1

EVENTS = ("P", "Q", "R", "S", "T")

# Normal-beat wave events (angle, magnitude, width), PQRST order.
DEFAULT_THETA = (-math.pi / 3.0, -math.pi / 12.0, 0.0, math.pi / 12.0, math.pi / 2.0)
DEFAULT_A = (1.2, -5.0, 30.0, -7.5, 0.75)
DEFAULT_B = (0.25, 0.1, 0.1, 0.1, 0.4)

FS = 360.0
BEAT_LEN = 216
R_PEAK_INDEX = 72

# One limit-cycle revolution per 216-sample window.
DEFAULT_OMEGA = 2.0 * math.pi / (BEAT_LEN / FS)
BASELINE_AMPLITUDE = 0.15
RESPIRATORY_FREQ = 0.25

X0 = -0.41
Y0 = -0.91

# Names of the 15 free components, in vector order.
ETA_COMPONENTS = tuple(
    [f"theta_{e}" for e in EVENTS] + [f"a_{e}" for e in EVENTS] + [f"b_{e}" for e in EVENTS]
)

B_MIN = 0.01

CLASSES = ("N", "S", "V", "F")
