"""Fixed kernels and color-space constants used by both camera pipelines.

The YUV matrices form a near-exact inverse pair (round trip error below
1e-8), so converting into YUV for sharpening and back for denoising costs
essentially nothing in precision. K_BLUR is kept verbatim rather than
re-derived; its taps sum to 0.9999971905, not 1, and downstream checks
account for that.
"""

from __future__ import annotations

import numpy as np


def _frozen(rows) -> np.ndarray:
    a = np.array(rows, dtype=np.float64)
    a.setflags(write=False)
    return a


# Bilinear demosaicing kernels for sparse color planes. The cross kernel
# rebuilds the checkerboard green plane; the full kernel rebuilds the
# quarter-density red and blue planes. Swapping them breaks constant
# preservation (the full kernel sums to 2 on a checkerboard support).
K_CROSS = _frozen([[0.00, 0.25, 0.00],
                   [0.25, 1.00, 0.25],
                   [0.00, 0.25, 0.00]])

K_FULL = _frozen([[0.25, 0.50, 0.25],
                  [0.50, 1.00, 0.50],
                  [0.25, 0.50, 0.25]])

# Sharpening kernel: taps sum to exactly 1.
K_SHARP = _frozen([[0.0, -1.0, 0.0],
                   [-1.0, 5.0, -1.0],
                   [0.0, -1.0, 0.0]])

# 5x5 Gaussian-shaped blur used for denoising, taps as published.
K_BLUR = _frozen([[6.9625e-08, 2.8089e-05, 2.0755e-04, 2.8089e-05, 6.9625e-08],
                  [2.8089e-05, 1.1332e-02, 8.3731e-02, 1.1332e-02, 2.8089e-05],
                  [2.0755e-04, 8.3731e-02, 6.1869e-01, 8.3731e-02, 2.0755e-04],
                  [2.8089e-05, 1.1332e-02, 8.3731e-02, 1.1332e-02, 2.8089e-05],
                  [6.9625e-08, 2.8089e-05, 2.0755e-04, 2.8089e-05, 6.9625e-08]])

M_RGB_TO_YUV = _frozen([[0.299, 0.587, 0.114],
                        [-0.14714119, -0.28886916, 0.43601035],
                        [0.61497538, -0.51496512, -0.10001026]])

M_YUV_TO_RGB = _frozen([[1.0000000000e+00, -4.1827794561e-09, 1.1398830414e+00],
                        [1.0000000000e+00, -3.9464232326e-01, -5.8062183857e-01],
                        [1.0000000000e+00, 2.0320618153e+00, -1.2232658220e-09]])

DEFAULT_GAMMA = 2.2
