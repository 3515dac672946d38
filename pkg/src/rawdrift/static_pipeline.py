"""Fixed (non-differentiable) camera pipeline and its menu of algorithms.

Stage order: black level, demosaic, white balance, color correction,
sharpening, denoising, gamma. Sharpening converts into YUV and the denoiser
converts back, so both luminance filters run in YUV space. Every spatial
filter pads by mirror reflection, which keeps constant inputs constant all
the way to the border.

The menu is 3 demosaicers x 2 sharpeners x 2 denoisers = 12 configurations,
abbreviated like "bi,s,ga" (bilinear, sharp filter, gaussian denoise).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndops
from .kernels import (DEFAULT_GAMMA, K_BLUR, K_CROSS, K_FULL, K_SHARP,
                      M_RGB_TO_YUV, M_YUV_TO_RGB)
from .rawio import CfaLayout, blacklevel_site_map

DEMOSAIC_ABBREV = {"bilinear": "bi", "malvar": "ma", "menon": "me"}
SHARPEN_ABBREV = {"sharp_filter": "s", "unsharp_mask": "u"}
DENOISE_ABBREV = {"median": "me", "gaussian": "ga"}

_IDENTITY3 = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


@dataclass(frozen=True)
class StaticConfig:
    """One point on the pipeline menu plus its continuous parameters."""

    demosaic: str = "bilinear"
    sharpen: str = "sharp_filter"
    denoise: str = "gaussian"
    black_levels: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    wb_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    color_matrix: tuple = _IDENTITY3
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        for name, table in (("demosaic", DEMOSAIC_ABBREV),
                            ("sharpen", SHARPEN_ABBREV),
                            ("denoise", DENOISE_ABBREV)):
            if getattr(self, name) not in table:
                raise ValueError(f"unknown {name} {getattr(self, name)!r}; "
                                 f"choose from {sorted(table)}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @property
    def label(self) -> str:
        return ",".join((DEMOSAIC_ABBREV[self.demosaic],
                         SHARPEN_ABBREV[self.sharpen],
                         DENOISE_ABBREV[self.denoise]))

    @property
    def slug(self) -> str:
        """Filesystem-safe form of the label."""
        return self.label.replace(",", "-")


def enumerate_configs(base: StaticConfig | None = None) -> list[StaticConfig]:
    """All 12 menu combinations, demosaic-major, in a fixed order."""
    base = base or StaticConfig()
    return [replace(base, demosaic=dm, sharpen=sh, denoise=dn)
            for dm, sh, dn in itertools.product(
                ("bilinear", "malvar", "menon"),
                ("sharp_filter", "unsharp_mask"),
                ("median", "gaussian"))]


def config_by_label(label: str) -> StaticConfig:
    for cfg in enumerate_configs():
        if cfg.label == label or cfg.slug == label:
            return cfg
    raise ValueError(f"no pipeline configuration labelled {label!r}")


# --- stages -----------------------------------------------------------------

def black_level(mosaic: np.ndarray, offsets) -> np.ndarray:
    """Subtract one offset per 2x2 parity site, clamped at zero."""
    offsets = np.asarray(offsets, dtype=np.float64)
    h, w = mosaic.shape[-2:]
    bl = offsets[blacklevel_site_map(h, w)]
    return np.maximum(mosaic - bl, 0.0)


def demosaic(mosaic: np.ndarray, cfa: CfaLayout, method: str) -> np.ndarray:
    return _DEMOSAICERS[method](mosaic, cfa)


def demosaic_bilinear(mosaic: np.ndarray, cfa: CfaLayout) -> np.ndarray:
    """Zero-filled color planes convolved with the bilinear kernels.

    The cross kernel interpolates the half-density green plane; the full
    kernel interpolates the quarter-density red and blue planes.
    """
    h, w = mosaic.shape[-2:]
    masks = cfa.plane_masks(h, w)
    chans = [ndops.conv2d_same(mosaic * masks[c], kern, "reflect")
             for c, kern in ((0, K_FULL), (1, K_CROSS), (2, K_FULL))]
    return np.stack(chans, axis=-3)


# 5x5 gradient-corrected interpolation kernels. Each sums to 1.
_MALVAR_G = np.array([[0, 0, -1, 0, 0],
                      [0, 0, 2, 0, 0],
                      [-1, 2, 4, 2, -1],
                      [0, 0, 2, 0, 0],
                      [0, 0, -1, 0, 0]]) / 8.0
_MALVAR_ROW = np.array([[0, 0, 0.5, 0, 0],
                        [0, -1, 0, -1, 0],
                        [-1, 4, 5, 4, -1],
                        [0, -1, 0, -1, 0],
                        [0, 0, 0.5, 0, 0]]) / 8.0
_MALVAR_COL = _MALVAR_ROW.T
_MALVAR_DIAG = np.array([[0, 0, -1.5, 0, 0],
                         [0, 2, 0, 2, 0],
                         [-1.5, 0, 6, 0, -1.5],
                         [0, 2, 0, 2, 0],
                         [0, 0, -1.5, 0, 0]]) / 8.0


def demosaic_malvar(mosaic: np.ndarray, cfa: CfaLayout) -> np.ndarray:
    """Gradient-corrected linear interpolation with 5x5 kernels."""
    h, w = mosaic.shape[-2:]
    rm, gm, bm = cfa.plane_masks(h, w)
    ys = np.arange(h)[:, None]
    red_pos = divmod(cfa.pattern.index("R"), 2)
    red_row = (ys % 2 == red_pos[0]).astype(np.float64) * np.ones(w)
    blue_row = 1.0 - red_row
    g_est = ndops.conv2d_same(mosaic, _MALVAR_G, "reflect")
    row_est = ndops.conv2d_same(mosaic, _MALVAR_ROW, "reflect")
    col_est = ndops.conv2d_same(mosaic, _MALVAR_COL, "reflect")
    diag_est = ndops.conv2d_same(mosaic, _MALVAR_DIAG, "reflect")
    g = mosaic * gm + g_est * (rm + bm)
    r = mosaic * rm + row_est * gm * red_row + col_est * gm * blue_row + diag_est * bm
    b = mosaic * bm + row_est * gm * blue_row + col_est * gm * red_row + diag_est * rm
    return np.stack([r, g, b], axis=-3)


_MENON_G0 = np.array([0.0, 0.5, 0.0, 0.5, 0.0])
_MENON_G1 = np.array([-0.25, 0.0, 0.5, 0.0, -0.25])
_MENON_PAIR = np.array([0.5, 0.0, 0.5])
# Neighborhood weights for the direction decision, applied to the
# chrominance gradient field. Asymmetric on purpose: the window trails the
# site so both directions integrate the same number of samples.
_MENON_DECIDE = np.array([[0.0, 0.0, 1.0, 0.0, 1.0],
                          [0.0, 0.0, 0.0, 1.0, 0.0],
                          [0.0, 0.0, 3.0, 0.0, 3.0],
                          [0.0, 0.0, 0.0, 1.0, 0.0],
                          [0.0, 0.0, 1.0, 0.0, 1.0]])


def _shift_back(x: np.ndarray, axis: int) -> np.ndarray:
    """x shifted by -2 along axis with reflected tail."""
    n = x.shape[axis]
    idx = np.arange(2, n + 2)
    idx[idx > n - 1] = 2 * (n - 1) - idx[idx > n - 1]
    return np.take(x, idx, axis=axis)


def demosaic_menon(mosaic: np.ndarray, cfa: CfaLayout) -> np.ndarray:
    """Directional interpolation with a posteriori decision, no refining.

    Green is rebuilt along rows and along columns; a chrominance-gradient
    vote picks one direction per site. Red and blue then follow by
    color-difference interpolation, directionally at the opposite chroma
    sites. Every estimator is an affine combination with unit weight sum,
    so constants survive.
    """
    h, w = mosaic.shape[-2:]
    rm, gm, bm = cfa.plane_masks(h, w)
    ys = np.arange(h)[:, None]
    red_pos = divmod(cfa.pattern.index("R"), 2)
    red_row = (ys % 2 == red_pos[0]).astype(np.float64) * np.ones(w)
    blue_row = 1.0 - red_row

    est = ndops.conv1d_axis(mosaic, _MENON_G0, -1) + ndops.conv1d_axis(mosaic, _MENON_G1, -1)
    g_h = gm * mosaic + (1 - gm) * est
    est = ndops.conv1d_axis(mosaic, _MENON_G0, -2) + ndops.conv1d_axis(mosaic, _MENON_G1, -2)
    g_v = gm * mosaic + (1 - gm) * est

    chroma = rm + bm
    c_h = chroma * (mosaic - g_h)
    c_v = chroma * (mosaic - g_v)
    d_h = np.abs(c_h - _shift_back(c_h, -1))
    d_v = np.abs(c_v - _shift_back(c_v, -2))
    score_h = ndops.conv2d_same(d_h, _MENON_DECIDE, "zero")
    score_v = ndops.conv2d_same(d_v, _MENON_DECIDE.T, "zero")
    horizontal = score_v >= score_h
    g = np.where(horizontal, g_h, g_v)

    def pair_h(x):
        return ndops.conv1d_axis(x, _MENON_PAIR, -1)

    def pair_v(x):
        return ndops.conv1d_axis(x, _MENON_PAIR, -2)

    # Chroma at green sites: both same-color neighbors sit along the row
    # (red in red rows, blue in blue rows) or along the column otherwise.
    r = mosaic * rm
    b = mosaic * bm
    r = np.where(gm * red_row == 1, g + pair_h(r) - pair_h(g * rm), r)
    r = np.where(gm * blue_row == 1, g + pair_v(r) - pair_v(g * rm), r)
    b = np.where(gm * blue_row == 1, g + pair_h(b) - pair_h(g * bm), b)
    b = np.where(gm * red_row == 1, g + pair_v(b) - pair_v(g * bm), b)
    # Chroma at the opposite chroma site: neighbors along the decided
    # direction are green sites already filled above.
    r = np.where(bm == 1,
                 np.where(horizontal, b + pair_h(r) - pair_h(b),
                          b + pair_v(r) - pair_v(b)),
                 r)
    b = np.where(rm == 1,
                 np.where(horizontal, r + pair_h(b) - pair_h(r),
                          r + pair_v(b) - pair_v(r)),
                 b)
    return np.stack([r, g, b], axis=-3)


def white_balance(rgb: np.ndarray, gains) -> np.ndarray:
    gains = np.asarray(gains, dtype=np.float64)
    return rgb * gains[:, None, None]


def color_correct(rgb: np.ndarray, matrix) -> np.ndarray:
    return ndops.channel_affine(rgb, np.asarray(matrix, dtype=np.float64))


def rgb_to_yuv(rgb: np.ndarray) -> np.ndarray:
    return ndops.channel_affine(rgb, M_RGB_TO_YUV)


def yuv_to_rgb(yuv: np.ndarray) -> np.ndarray:
    return ndops.channel_affine(yuv, M_YUV_TO_RGB)


def sharpen_sharp_filter(yuv: np.ndarray) -> np.ndarray:
    return ndops.conv2d_same(yuv, K_SHARP, "reflect")


def sharpen_unsharp_mask(yuv: np.ndarray, radius: float = 1.0,
                         amount: float = 1.0) -> np.ndarray:
    blurred = ndops.gaussian_blur(yuv, sigma=radius, mode="reflect")
    return yuv + amount * (yuv - blurred)


def denoise_gaussian(yuv: np.ndarray) -> np.ndarray:
    return ndops.conv2d_same(yuv, K_BLUR, "reflect")


def denoise_median(yuv: np.ndarray) -> np.ndarray:
    return ndops.median3x3(yuv, "reflect")


def gamma_correct(rgb: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Clip into [0, 1], then brighten with exponent 1/gamma."""
    return np.clip(rgb, 0.0, 1.0) ** (1.0 / gamma)


_DEMOSAICERS = {"bilinear": demosaic_bilinear,
                "malvar": demosaic_malvar,
                "menon": demosaic_menon}
_SHARPENERS = {"sharp_filter": sharpen_sharp_filter,
               "unsharp_mask": sharpen_unsharp_mask}
_DENOISERS = {"gaussian": denoise_gaussian,
              "median": denoise_median}


def process_static(mosaic: np.ndarray, config: StaticConfig,
                   cfa: CfaLayout | None = None,
                   return_stages: bool = False):
    """Run the full static pipeline on one [0, 1] mosaic.

    Returns the (3, h, w) rendering, or (rendering, stages) where stages
    maps stage names to intermediates.
    """
    mosaic = np.asarray(mosaic, dtype=np.float64)
    if mosaic.ndim != 2:
        raise ValueError("process_static expects one 2-d mosaic")
    if mosaic.shape[0] % 2 or mosaic.shape[1] % 2:
        raise ValueError("mosaic sides must be even")
    cfa = cfa or CfaLayout()
    stages: dict[str, np.ndarray] = {}
    v = black_level(mosaic, config.black_levels)
    stages["black_level"] = v
    v = demosaic(v, cfa, config.demosaic)
    stages["demosaic"] = v
    v = white_balance(v, config.wb_gains)
    stages["white_balance"] = v
    v = color_correct(v, config.color_matrix)
    stages["color_correct"] = v
    v = _SHARPENERS[config.sharpen](rgb_to_yuv(v))
    stages["sharpen"] = v
    v = yuv_to_rgb(_DENOISERS[config.denoise](v))
    stages["denoise"] = v
    v = gamma_correct(v, config.gamma)
    stages["gamma"] = v
    return (v, stages) if return_stages else v
