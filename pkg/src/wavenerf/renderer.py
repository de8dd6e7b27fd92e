"""Hybrid renderer: per-view tokens in the spatial and frequency domains,
attention over views, a ray-axis auto-encoder for density, view-weighted
colour and frequency blending with a frequency-driven colour modulation,
and alpha compositing.

Densities are per unit length: the compositing opacity of sample n is
``1 - exp(-sigma_n * delta_n)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import ModelConfig
from .geometry import in_image, to_grid
from .mvs import LEVEL_SCALES, FREQ_SCALE, FeatureNet, SceneFeatures, sample_volume, wmvs
from .nn import MLP, Conv2d, Linear, Module
from .sampler import Rays, sample_rays
from .tensor import (
    Tensor,
    concat,
    cumsum,
    elu,
    exp,
    gather_matrix,
    getitem,
    matmul,
    no_grad,
    pad2d,
    relu,
    reshape,
    softmax,
    softplus,
    sparse_apply,
    stack,
    transpose,
    tsum,
)


def direction_encoding(target_dirs, source_dirs, n_freqs):
    """Sinusoidal code of the angle between target and source rays, (M, 2F)."""
    cos = np.clip(np.einsum("mk,mk->m", target_dirs, source_dirs), -1.0, 1.0)
    theta = np.arccos(cos)[:, None] * (2.0 ** np.arange(n_freqs))
    return np.concatenate([np.sin(theta), np.cos(theta)], axis=1)


def spatial_input_width(cfg: ModelConfig):
    return 3 * sum(cfg.spatial_channels) + 2 * cfg.dir_freqs


def freq_input_width(cfg: ModelConfig):
    return 3 * cfg.freq_channels + 2 * cfg.dir_freqs


@dataclass
class ViewSamples:
    spatial: Tensor        # (M, V, Ds) raw spatial-domain inputs per view
    freq: Tensor           # (M, V, Dw) raw frequency-domain inputs per view
    colors: np.ndarray     # (M, V, 3) source colours at the projections
    hf: np.ndarray         # (M, V, F) compounded high-frequency samples
    valid: np.ndarray      # (M, V) projection lands inside the source image


def _flat_maps(t):
    v, c, h, w = t.shape
    return transpose(reshape(t, (v, c, h * w)), (0, 2, 1))


def _bilinear(cam, points, scale, h, w):
    uv, _ = cam.project(points, scale)
    idx, wts, _ = F.bilinear_taps(to_grid(uv), h, w)
    return gather_matrix(idx, wts, h * w)


def gather_view_samples(feats: SceneFeatures, points, target_dirs, dir_freqs):
    """Sample every source view's maps and volumes at world ``points`` (M, 3)."""
    maps = feats.maps
    flat_s = [_flat_maps(m) for m in maps.spatial]
    flat_w = _flat_maps(maps.freq)
    imgs = maps.images
    n_views, _, hgt, wid = imgs.shape
    hf = maps.hf
    s_parts, w_parts, colors, hfs, valid = [], [], [], [], []
    for v, cam in enumerate(feats.cams):
        uv, z = cam.project(points)
        valid.append((z > 1e-9) & in_image(uv, hgt, wid))
        src_dirs = points - cam.center
        src_dirs = src_dirs / np.linalg.norm(src_dirs, axis=1, keepdims=True)
        enc = Tensor(direction_encoding(target_dirs, src_dirs, dir_freqs))

        cache = {}

        def mat_for(scale, h, w):
            if (scale, h, w) not in cache:
                cache[scale, h, w] = _bilinear(cam, points, scale, h, w)
            return cache[scale, h, w]

        map_samples, vol_samples = [], []
        for lvl, scale in enumerate(LEVEL_SCALES):
            _, _, h, w = maps.spatial[lvl].shape
            map_samples.append(sparse_apply(mat_for(scale, h, w), getitem(flat_s[lvl], v)))
            vol_samples.append(sample_volume(feats.spatial[lvl][v], cam, points)[0])
        s_parts.append(concat(map_samples + vol_samples + [enc], axis=1))

        _, _, h, w = maps.freq.shape
        m = mat_for(FREQ_SCALE, h, w)
        fw = sparse_apply(m, getitem(flat_w, v))
        pw = sample_volume(feats.freq[v], cam, points)[0]
        w_parts.append(concat([fw, pw, enc], axis=1))
        hfs.append(np.asarray(m @ hf[v].reshape(hf.shape[1], -1).T))
        colors.append(np.asarray(mat_for(1.0, hgt, wid) @ imgs[v].reshape(imgs.shape[1], -1).T))
    return ViewSamples(spatial=stack(s_parts, axis=1), freq=stack(w_parts, axis=1),
                       colors=np.stack(colors, axis=1), hf=np.stack(hfs, axis=1),
                       valid=np.stack(valid, axis=1))


def masked_mean_var(x, valid):
    """Mean and population variance over the view axis of (M, V, D),
    counting only valid views."""
    mask = valid.astype(np.float64)[..., None]
    n = np.maximum(mask.sum(axis=1), 1.0)
    mean = tsum(x * mask, axis=1) * (1.0 / n)
    dev = x - reshape(mean, (mean.shape[0], 1, mean.shape[1]))
    var = tsum(dev * dev * mask, axis=1) * (1.0 / n)
    return mean, var


class TokenEmbed(Module):
    """Linear view-token embedding plus a global token from view statistics."""

    def __init__(self, n_in, width, rng):
        self.view = Linear(n_in, width, rng)
        self.glob = Linear(2 * n_in, width, rng)

    def __call__(self, x, valid):
        mean, var = masked_mean_var(x, valid)
        return self.glob(concat([mean, var], axis=1)), self.view(x)


class Attention(Module):
    """One multi-head attention layer over views plus a feed-forward layer.

    Queries are the global token and the view tokens; keys and values are
    the valid view tokens only.  Both sub-layers are residual.
    """

    def __init__(self, width, heads, hidden, rng):
        self.heads = heads
        self.q = Linear(width, width, rng, bias=False)
        self.k = Linear(width, width, rng, bias=False)
        self.v = Linear(width, width, rng, bias=False)
        self.o = Linear(width, width, rng)
        self.ff = MLP(width, hidden, width, rng)

    def _split(self, x):
        m, n, t = x.shape
        return transpose(reshape(x, (m, n, self.heads, t // self.heads)), (0, 2, 1, 3))

    def attention_weights(self, x, views, valid):
        q, k = self._split(self.q(x)), self._split(self.k(views))
        scale = 1.0 / np.sqrt(q.shape[-1])
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
        return softmax(scores, axis=-1, mask=valid[:, None, None, :])

    def __call__(self, glob, views, valid):
        m, n_views, t = views.shape
        x = concat([reshape(glob, (m, 1, t)), views], axis=1)
        att = self.attention_weights(x, views, valid)
        mixed = matmul(att, self._split(self.v(views)))
        mixed = reshape(transpose(mixed, (0, 2, 1, 3)), (m, n_views + 1, t))
        h = x + self.o(mixed)
        h = h + self.ff(h)
        return getitem(h, (slice(None), 0)), getitem(h, (slice(None), slice(1, None)))


def _conv1d(c_in, c_out, rng, stride=1, k=3):
    return Conv2d(c_in, c_out, (1, k), rng, stride=(1, stride), padding=(0, k // 2),
                  padding_mode="edge")


def _upsample_ray(x):
    b, c, _, n = x.shape
    up = reshape(x, (b, c, 1, n, 1)) * np.ones(2)
    return reshape(up, (b, c, 1, 2 * n))


class RayAutoEncoder(Module):
    """1D convolutional encoder/decoder along the ray axis with skips.

    Two stride-2 stages plus a ray-wide mean at the bottleneck, so every
    output sees every input sample.  Output is a softplus density.
    """

    def __init__(self, width, channels, rng):
        self.enc0 = _conv1d(width, channels, rng)
        self.enc1 = _conv1d(channels, channels, rng, stride=2)
        self.enc2 = _conv1d(channels, channels, rng, stride=2)
        self.pool = Conv2d(channels, channels, 1, rng, padding=0)
        self.dec1 = _conv1d(2 * channels, channels, rng)
        self.dec0 = _conv1d(2 * channels, channels, rng)
        self.out = Conv2d(channels, 1, 1, rng, padding=0)

    def __call__(self, tokens, valid):
        """``tokens`` (B, N, T), ``valid`` (B, N) -> sigma (B, N)."""
        b, n, t = tokens.shape
        pad = (-n) % 4
        x = reshape(transpose(tokens, (0, 2, 1)), (b, t, 1, n))
        if pad:
            x = pad2d(x, (0, 0), (0, pad), "edge")
        e0 = elu(self.enc0(x))
        e1 = elu(self.enc1(e0))
        e2 = elu(self.enc2(e1))
        e2 = e2 + self.pool(tsum(e2, axis=3, keepdims=True) * (1.0 / e2.shape[3]))
        d1 = elu(self.dec1(concat([_upsample_ray(e2), e1], axis=1)))
        d0 = elu(self.dec0(concat([_upsample_ray(d1), e0], axis=1)))
        sigma = softplus(reshape(self.out(d0), (b, n + pad)))
        if pad:
            sigma = getitem(sigma, (slice(None), slice(0, n)))
        return sigma * valid.astype(np.float64)


def blend(weights, samples):
    """Convex combination over views: (M, V) weights, (M, V, D) samples."""
    m, v = weights.shape
    return tsum(reshape(weights, (m, v, 1)) * samples, axis=1)


def predict_freq(weight_mlp, freq_tokens, hf, valid):
    m, v, _ = freq_tokens.shape
    w = softmax(reshape(weight_mlp(freq_tokens), (m, v)), axis=1, mask=valid)
    return blend(w, hf), w


def modulate(base, lt, fhat):
    """``base * (LT(fhat) + 1)`` clamped below at 0."""
    return relu(base * (lt(fhat) + 1.0))


def predict_color(weight_mlp, lt, spatial_tokens, freq_tokens, colors, fhat, valid,
                  use_lt=True):
    m, v, _ = spatial_tokens.shape
    logits = weight_mlp(concat([spatial_tokens, freq_tokens], axis=2))
    w = softmax(reshape(logits, (m, v)), axis=1, mask=valid)
    base = blend(w, colors)
    return (modulate(base, lt, fhat) if use_lt else base), w


@dataclass
class RenderOutput:
    color: Tensor      # (B, 3)
    freq: Tensor       # (B, F)
    depth: Tensor      # (B,)
    alpha: Tensor      # (B, N) compositing weights
    sigma: Tensor      # (B, N) densities
    z: np.ndarray      # (B, N) sample depths

    @property
    def opacity(self):
        return self.alpha.data.sum(axis=1)


def interval_lengths(z, far):
    z = np.atleast_2d(z)
    far = np.broadcast_to(np.asarray(far, dtype=np.float64).reshape(-1, 1), (len(z), 1))
    return np.concatenate([np.diff(z, axis=1), far - z[:, -1:]], axis=1)


def compositing_weights(sigma_tilde):
    """alpha_n = exp(-sum_{k<n} s_k) - exp(-sum_{k<=n} s_k) for optical depths s (B, N)."""
    b = sigma_tilde.shape[0]
    total = cumsum(sigma_tilde, axis=1)
    before = concat([Tensor(np.zeros((b, 1))),
                     getitem(total, (slice(None), slice(0, sigma_tilde.shape[1] - 1)))], axis=1)
    return exp(before * -1.0) - exp(total * -1.0)


def composite(sigma, z, far, colors, freqs):
    """Alpha-composite per-sample colours (B, N, 3) and frequencies (B, N, F)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if np.any(np.diff(z, axis=1) <= 0):
        raise ValueError("composite: sample depths must be strictly increasing")
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    alpha = compositing_weights(sigma * interval_lengths(z, far))
    b, n = z.shape
    a3 = reshape(alpha, (b, n, 1))
    return RenderOutput(color=tsum(a3 * colors, axis=1), freq=tsum(a3 * freqs, axis=1),
                        depth=tsum(alpha * z, axis=1), alpha=alpha, sigma=sigma, z=z)


class HybridRenderer(Module):
    def __init__(self, cfg: ModelConfig, rng, n_freq=18):
        t = cfg.token_width
        self.cfg = cfg
        self.embed_s = TokenEmbed(spatial_input_width(cfg), t, rng)
        self.embed_w = TokenEmbed(freq_input_width(cfg), t, rng)
        self.aba_s = Attention(t, cfg.heads, cfg.hidden, rng)
        self.aba_w = Attention(t, cfg.heads, cfg.hidden, rng)
        self.density = RayAutoEncoder(t, cfg.ae_channels, rng)
        self.weights_s = MLP(2 * t, cfg.hidden, 1, rng)
        self.weights_w = MLP(t, cfg.hidden, 1, rng)
        self.lt = MLP(n_freq, cfg.hidden, 1, rng)

    def __call__(self, feats: SceneFeatures, rays: Rays, z, use_lt=True):
        b, n = z.shape
        points = rays.points(z).reshape(-1, 3)
        dirs = np.repeat(rays.dirs, n, axis=0)
        vs = gather_view_samples(feats, points, dirs, self.cfg.dir_freqs)
        gs, ts = self.embed_s(vs.spatial, vs.valid)
        gw, tw = self.embed_w(vs.freq, vs.valid)
        gs, ts = self.aba_s(gs, ts, vs.valid)
        _, tw = self.aba_w(gw, tw, vs.valid)
        seen = vs.valid.any(axis=1).reshape(b, n)
        sigma = self.density(reshape(gs, (b, n, gs.shape[-1])), seen)
        fhat, _ = predict_freq(self.weights_w, tw, vs.hf, vs.valid)
        chat, _ = predict_color(self.weights_s, self.lt, ts, tw, vs.colors, fhat, vs.valid,
                                use_lt)
        return composite(sigma, z, rays.far, reshape(chat, (b, n, 3)),
                         reshape(fhat, (b, n, fhat.shape[-1])))


class WaveNeRF(Module):
    """Feature network plus renderer."""

    def __init__(self, cfg: ModelConfig, seed=0, in_channels=3):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.net = FeatureNet(cfg, rng, in_channels)
        self.renderer = HybridRenderer(cfg, rng, n_freq=6 * in_channels)

    def features(self, cams) -> SceneFeatures:
        return wmvs(cams, self.net, self.cfg)

    def sample(self, feats, rays, sampler_cfg, seed, strategy=None):
        return sample_rays(rays, sampler_cfg.n_coarse, sampler_cfg.n_fine, seed,
                           strategy or sampler_cfg.strategy, feats.freq, feats.cams,
                           sampler_cfg.eps_floor)

    def render(self, feats, rays, sampler_cfg, seed, strategy=None, z=None, use_lt=True):
        if z is None:
            z = self.sample(feats, rays, sampler_cfg, seed, strategy).merged_z
        return self.renderer(feats, rays, z, use_lt)


@dataclass
class ViewRender:
    color: np.ndarray      # (3, H, W)
    depth: np.ndarray      # (H, W)
    freq: np.ndarray       # (F, H, W)
    opacity: np.ndarray    # (H, W)


def render_view(model: WaveNeRF, feats: SceneFeatures, cam, sampler_cfg, seed=0, chunk=256,
                strategy=None):
    """Render every pixel of ``cam``; ray ids are pixel indices, so the
    output depends only on ``seed`` and the parameters."""
    h, w = cam.height, cam.width
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rays = Rays.from_camera(cam, rows.ravel(), cols.ravel())
    color, depth, freq, opac = [], [], [], []
    with no_grad():
        for start in range(0, len(rays), chunk):
            sub = rays.subset(slice(start, start + chunk))
            out = model.render(feats, sub, sampler_cfg, seed, strategy)
            color.append(out.color.data)
            depth.append(out.depth.data)
            freq.append(out.freq.data)
            opac.append(out.opacity)
    color = np.concatenate(color)
    freq = np.concatenate(freq)
    return ViewRender(color.T.reshape(3, h, w), np.concatenate(depth).reshape(h, w),
                      freq.T.reshape(freq.shape[1], h, w), np.concatenate(opac).reshape(h, w))
