"""Embedded data of the system-identification benchmark case.

The cubic two-input two-output polynomial and the 18x18 covariance of its
non-constant coefficients are stored at one-decimal precision.
Coefficients are indexed in coeff_vector order (ascending
graded-lexicographic monomials, output-major):

    u1, u2, u1^2, u1*u2, u2^2, u1^3, u1^2*u2, u1*u2^2, u2^3

first for output 1, then for output 2.  A checksum guards the table
against accidental edits.
"""

from __future__ import annotations

import hashlib

import numpy as np

# non-constant coefficients of the two outputs, basis order as above
F1_COEFFS = [-0.25, 0.84, 0.22, -0.44, 0.41, 0.09, -3.3, 5.0, -2.2]
F2_COEFFS = [-0.053, -0.27, -0.21, 0.45, -0.12, -0.042, 3.2, -4.9, 2.3]

SIGMA_F_TEXT = """\
2.0 -1.5 0.1 -0.3 0.1 -9.3 25.7 -26.7 9.3 -2.0 1.5 -0.1 0.3 -0.1 9.3 -25.7 26.7 -9.4
-1.5 1.8 -0.0 0.0 -0.0 7.5 -24.6 27.9 -11.3 1.5 -1.8 0.0 -0.0 0.0 -7.5 24.5 -27.8 11.2
0.1 -0.0 9.6 -16.0 7.3 -3.7 6.5 0.3 -2.2 -0.1 0.0 -9.6 15.9 -7.3 3.7 -6.6 -0.2 2.2
-0.3 0.0 -16.0 32.2 -16.6 5.5 -5.5 -6.1 5.0 0.3 -0.0 15.8 -32.0 16.5 -5.5 5.7 5.7 -4.9
0.1 -0.0 7.3 -16.6 10.4 -2.7 1.6 4.2 -2.7 -0.1 0.0 -7.3 16.4 -10.3 2.7 -1.8 -4.0 2.6
-9.3 7.5 -3.7 5.5 -2.7 105.7 -275.3 227.3 -56.6 9.3 -7.5 3.7 -5.5 2.7 -105.5 275.4 -228.3 57.2
25.7 -24.6 6.5 -5.5 1.6 -275.3 850.9 -824.9 245.7 -25.6 24.6 -6.5 5.6 -1.6 273.5 -847.5 823.8 -246.2
-26.7 27.9 0.3 -6.1 4.2 227.3 -824.9 937.1 -327.3 26.5 -27.9 -0.2 5.9 -4.1 -225.3 819.0 -932.4 326.5
9.3 -11.3 -2.2 5.0 -2.7 -56.6 245.7 -327.3 134.5 -9.3 11.2 2.2 -4.9 2.6 55.9 -243.1 324.6 -133.7
-2.0 1.5 -0.1 0.3 -0.1 9.3 -25.6 26.5 -9.3 2.0 -1.5 0.1 -0.3 0.1 -9.3 25.6 -26.6 9.3
1.5 -1.8 0.0 -0.0 0.0 -7.5 24.6 -27.9 11.2 -1.5 1.8 -0.0 0.0 -0.0 7.5 -24.4 27.7 -11.2
-0.1 0.0 -9.6 15.8 -7.3 3.7 -6.5 -0.2 2.2 0.1 -0.0 9.5 -15.8 7.3 -3.7 6.5 0.1 -2.1
0.3 -0.0 15.9 -32.0 16.4 -5.5 5.6 5.9 -4.9 -0.3 0.0 -15.8 31.8 -16.4 5.5 -5.8 -5.6 4.8
-0.1 0.0 -7.3 16.5 -10.3 2.7 -1.6 -4.1 2.6 0.1 -0.0 7.3 -16.4 10.3 -2.7 1.8 3.9 -2.6
9.3 -7.5 3.7 -5.5 2.7 -105.5 273.5 -225.3 55.9 -9.3 7.5 -3.7 5.5 -2.7 105.2 -273.8 226.3 -56.5
-25.7 24.5 -6.6 5.7 -1.8 275.4 -847.5 819.0 -243.1 25.6 -24.4 6.5 -5.8 1.8 -273.8 844.5 -818.2 243.7
26.7 -27.8 -0.2 5.7 -4.0 -228.3 823.8 -932.4 324.6 -26.6 27.7 0.1 -5.6 3.9 226.3 -818.2 927.9 -323.9
-9.4 11.2 2.2 -4.9 2.6 57.2 -246.2 326.5 -133.7 9.3 -11.2 -2.1 4.8 -2.6 -56.5 243.7 -323.9 133.0
"""

SIGMA_F_SHA256 = "7d2858ee9d93aa38e3efa31b05e4ce49cbb765a49dcfc8588604126fc4e0dfdd"

# the almost-diagonal 8x8 SPD weight of the correlated-error experiment;
# entries (2,5) carry the 0.87 cross-covariance, entries (3,8) stay zero
CORR_WEIGHT = [
    [0.74, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 1.67, 0.0, 0.0, 0.87, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.96, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.63, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.87, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.11, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.77, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.31],
]


def sigma_f_matrix() -> np.ndarray:
    """Parse the embedded 18x18 covariance, verifying the checksum."""
    digest = hashlib.sha256(SIGMA_F_TEXT.encode()).hexdigest()
    if digest != SIGMA_F_SHA256:
        raise RuntimeError(
            "embedded covariance table failed its checksum; the table was modified"
        )
    rows = [[float(x) for x in line.split()] for line in SIGMA_F_TEXT.strip().splitlines()]
    M = np.array(rows)
    if M.shape != (18, 18):
        raise RuntimeError(f"embedded covariance has shape {M.shape}")
    return M
