"""Level-2 Haar analysis/synthesis, the learnable inverse wavelet block, and
the compounded high-frequency map.

Arrays are channel-first (C, H, W).  Band names follow the direction of the
high-pass filter: ``LH`` is low-pass along width and high-pass along height,
``HL`` the reverse, ``HH`` high-pass along both.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn import Deconv2d, Module
from .tensor import ShapeError, Tensor, concat, elu

_S = 1.0 / np.sqrt(2.0)
FILTERS = {
    # (low-pass, high-pass) analysis taps of orthonormal two-tap families
    "haar": (np.array([_S, _S]), np.array([_S, -_S])),
}
BAND_NAMES = ("LH", "HL", "HH")


def _filters(filter_id):
    try:
        return FILTERS[filter_id]
    except KeyError:
        raise ValueError(f"unknown wavelet filter {filter_id!r}") from None


def _band_filters(filter_id):
    lo, hi = _filters(filter_id)
    # (height filter, width filter) per band
    return {"LL": (lo, lo), "LH": (hi, lo), "HL": (lo, hi), "HH": (hi, hi)}


def dwt2(image, filter_id="haar"):
    """One analysis stage.  Returns (LL, LH, HL, HH), each (C, H/2, W/2).

    Two-tap filters never reach past a 2x2 block, so the half-sample
    symmetric boundary extension is never exercised.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"dwt2 needs even extents, got {h}x{w}")
    blocks = x.reshape(c, h // 2, 2, w // 2, 2)
    out = []
    for name in ("LL", "LH", "HL", "HH"):
        fh, fw = _band_filters(filter_id)[name]
        out.append(np.einsum("crimj,i,j->crm", blocks, fh, fw))
    return tuple(out)


def idwt2(ll, lh, hl, hh, filter_id="haar"):
    """Synthesis stage; exact inverse of :func:`dwt2` for orthonormal filters."""
    bands = [np.asarray(b, dtype=np.float64) for b in (ll, lh, hl, hh)]
    shapes = {b.shape for b in bands}
    if len(shapes) != 1:
        raise ShapeError(f"idwt2 bands differ in shape: {[b.shape for b in bands]}")
    c, h, w = bands[0].shape
    blocks = np.zeros((c, h, 2, w, 2))
    for name, band in zip(("LL", "LH", "HL", "HH"), bands):
        fh, fw = _band_filters(filter_id)[name]
        blocks += np.einsum("crm,i,j->crimj", band, fh, fw)
    return blocks.reshape(c, 2 * h, 2 * w)


@dataclass
class WaveletPyramid:
    """Two-level decomposition.  ``high[0]`` is level 1 (H/4), ``high[1]``
    level 2 (H/2); each entry is the (LH, HL, HH) triple."""

    low: np.ndarray
    high: list
    filter_id: str = "haar"

    @property
    def levels(self):
        return len(self.high)

    def energy(self):
        e = float(np.sum(self.low ** 2))
        return e + self.high_energy()

    def high_energy(self):
        return float(sum(np.sum(b ** 2) for trip in self.high for b in trip))


def decompose(image, levels=2, filter_id="haar"):
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    f = 2 ** levels
    if x.shape[-2] % f or x.shape[-1] % f:
        raise ShapeError(f"decompose(J={levels}) needs extents divisible by {f}, got "
                         f"{x.shape[-2]}x{x.shape[-1]}")
    high = []
    ll = x
    for _ in range(levels):
        ll, lh, hl, hh = dwt2(ll, filter_id)
        high.append((lh, hl, hh))
    # coarsest level first
    return WaveletPyramid(low=ll, high=high[::-1], filter_id=filter_id)


def reconstruct(p: WaveletPyramid):
    x = p.low
    for lh, hl, hh in p.high:
        x = idwt2(x, lh, hl, hh, p.filter_id)
    return x


def compound_hf(p: WaveletPyramid):
    """(6C, H/2, W/2) stack: level-1 subbands upsampled x2, then level-2 subbands."""
    if p.levels != 2:
        raise ValueError("compound_hf expects a two-level pyramid")
    lvl1, lvl2 = p.high
    h, w = lvl2[0].shape[-2:]
    up = [F.resize_array(b, h, w) for b in lvl1]
    return np.concatenate(up + list(lvl2), axis=0)


def haar_synthesis_kernel(channels):
    """(4C, C, 3, 3) deconvolution weights that make :class:`InverseWaveletBlock`
    reproduce :func:`idwt2` on inputs ordered (LL, LH, HL, HH)."""
    w = np.zeros((4 * channels, channels, 3, 3))
    for b, name in enumerate(("LL", "LH", "HL", "HH")):
        fh, fw = _band_filters("haar")[name]
        for c in range(channels):
            w[b * channels + c, c, 1:, 1:] = np.outer(fh, fw)
    return w


class InverseWaveletBlock(Module):
    """Learned inverse-DWT stage: concatenate the previous latent map with the
    current high-frequency subbands and upsample x2 with a strided (input
    dilated) transposed convolution followed by ELU."""

    def __init__(self, c_prev, c_bands, c_out, rng):
        self.c_prev, self.c_bands = c_prev, c_bands
        self.deconv = Deconv2d(c_prev + c_bands, c_out, 3, rng, stride=2, padding=1,
                               output_padding=1)

    def __call__(self, f_prev, bands):
        f_prev = f_prev if isinstance(f_prev, Tensor) else Tensor(f_prev)
        bands = bands if isinstance(bands, Tensor) else Tensor(bands)
        if f_prev.shape[-2:] != bands.shape[-2:]:
            raise ShapeError(
                f"IWB inputs differ in extent: {f_prev.shape[-2:]} vs {bands.shape[-2:]}")
        axis = f_prev.ndim - 3
        return elu(self.deconv(concat([f_prev, bands], axis=axis)))
