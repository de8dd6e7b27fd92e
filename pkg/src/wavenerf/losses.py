"""Colour, frequency, weighted-frequency and depth losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import wavelet
from .config import LossConfig
from .functional import resize_array
from .tensor import Tensor, as_tensor, tabs, tsum


def freq_target(image):
    """Per-pixel wavelet targets (6C, H, W): the compounded high-frequency
    map upsampled from half to full resolution."""
    image = np.asarray(image, dtype=np.float64)
    hf = wavelet.compound_hf(wavelet.decompose(image))
    return resize_array(hf, image.shape[-2], image.shape[-1])


def _sq_norm(pred, target):
    diff = as_tensor(pred) - np.asarray(target, dtype=np.float64)
    return tsum(diff * diff, axis=-1)


def loss_color(pred, target):
    """Mean over rays of the squared colour error norm."""
    return _sq_norm(pred, target).mean()


def loss_freq_base(pred, target):
    """Mean over rays of the squared frequency-coefficient error norm."""
    return _sq_norm(pred, target).mean()


def wfl_weights(f_gt):
    """Scalar weight per ray: mean absolute target coefficient."""
    return np.abs(np.asarray(f_gt, dtype=np.float64)).mean(axis=-1)


def loss_wfl(pred, target, f_gt):
    """Squared colour error weighted by the high-frequency magnitude of the target pixel."""
    return (_sq_norm(pred, target) * wfl_weights(f_gt)).mean()


def loss_depth(pred, target, opacity, threshold=0.5):
    """Mean absolute depth error over rays whose accumulated opacity exceeds
    ``threshold``.  Returns (loss, mask_empty)."""
    mask = np.asarray(opacity) > threshold
    if not mask.any():
        return Tensor(0.0), True
    err = tabs(as_tensor(pred) - np.asarray(target, dtype=np.float64))
    return tsum(err * mask.astype(np.float64)) * (1.0 / mask.sum()), False


@dataclass
class LossReport:
    L_c: float
    L_fb: float
    L_fw: float
    L_D: float
    total: float
    depth_mask_empty: bool = False

    def row(self):
        return [self.L_c, self.L_fb, self.L_fw, self.L_D, self.total]


def total_loss(parts, cfg: LossConfig = None):
    """Weighted sum of (L_c, L_fb, L_fw, L_D); works on floats or Tensors."""
    cfg = cfg or LossConfig()
    l_c, l_fb, l_fw, l_d = parts
    return (l_c * cfg.w_color + l_fb * cfg.w_freq_base + l_fw * cfg.w_freq_weighted
            + l_d * cfg.w_depth)


def compute_losses(color, freq, depth, opacity, c_gt, f_gt, d_gt, cfg: LossConfig = None):
    """All four terms and their weighted total.  Returns (total Tensor, LossReport)."""
    cfg = cfg or LossConfig()
    l_c = loss_color(color, c_gt)
    l_fb = loss_freq_base(freq, f_gt)
    l_fw = loss_wfl(color, c_gt, f_gt)
    l_d, empty = loss_depth(depth, d_gt, opacity, cfg.depth_mask_threshold)
    total = total_loss((l_c, l_fb, l_fw, l_d), cfg)
    report = LossReport(l_c.item(), l_fb.item(), l_fw.item(), l_d.item(), total.item(), empty)
    return total, report
