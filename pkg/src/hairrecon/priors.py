"""Strand and hairstyle priors.

Three layers live here: the per-strand parametric codec and its training
losses (reconstruction data term plus a KL penalty), the latent geometry
texture that stores one strand code per scalp texel, and the diffusion
prior trained on low-resolution subsamples of that texture with the
standard preconditioned-denoiser coefficient family.

The codecs come in two flavours with one evaluator interface: a linear
sinusoidal-basis codec (deterministic, exact least-squares encode, the
default for fitting) and a miniature trainable network pair built on the
tape.  Likewise the denoiser interface is just a shape-preserving callable
F(u, noise_embedding); a small convolutional reference implementation is
provided.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import adtape as t
from . import formats
from .adtape import Var
from .strands import LOCAL, Hairstyle, Strand, accumulate, tbn_frame, to_local

Array = np.ndarray

CODE_DIM = 64
TEXTURE_RES = 256
SUBSAMPLE_RES = 32
SUBSAMPLE_STRIDE = 8

LAMBDA_ORIENT = 0.05   # orientation weight in the strand data term
LAMBDA_CURV = 1.0      # curvature weight
LAMBDA_KL = 1e-4
VAR_FLOOR = 1e-12      # KL variance floor when an encoder collapses to 0

SIGMA_LOG_MEAN = -1.2  # noise levels are sampled log-normally
SIGMA_LOG_STD = 1.2

FULL_BACKPROP = "full_backprop"
SDS_IDENTITY = "sds_identity"


# ---------------------------------------------------------------------------
# strand data term

def strand_features(points: Array):
    """Unit segment orientations and scalar curvatures of a polyline.

    points (L, 3) -> (orientations (L-1, 3), curvatures (L-2,)); the
    curvature at a joint is the cross-product norm of the two adjacent
    unit orientations.
    """
    points = np.asarray(points, dtype=np.float64)
    raw = np.diff(points, axis=0)
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-length segment: orientation undefined")
    b = raw / norms[:, None]
    g = np.linalg.norm(np.cross(b[:-1], b[1:]), axis=1)
    return b, g


def loss_data_terms(p_hat, b_hat, g_hat, p, b, g,
                    lambda_d: float = LAMBDA_ORIENT,
                    lambda_c: float = LAMBDA_CURV):
    """The three summed pieces of the strand data term, given explicit
    features: (position, orientation, curvature).

    The cosine distance 1 - b_hat.b is computed as 0.5*|b_hat - b|^2, the
    same quantity for unit vectors but non-negative by construction and
    exactly zero on identical inputs.
    """
    pos = float(((np.asarray(p_hat) - np.asarray(p)) ** 2).sum())
    db = np.asarray(b_hat) - np.asarray(b)
    orient = lambda_d * 0.5 * float((db * db).sum())
    curv = lambda_c * float(((np.asarray(g_hat) - np.asarray(g)) ** 2).sum())
    return pos, orient, curv


def _strand_points(s) -> Array:
    if isinstance(s, Strand):
        if s.frame != LOCAL:
            raise ValueError("data term expects tbn-local strands")
        return s.points
    return np.asarray(s, dtype=np.float64)


def loss_data(pred, gt, lambda_d: float = LAMBDA_ORIENT,
              lambda_c: float = LAMBDA_CURV) -> float:
    """Squared point error + weighted orientation and curvature mismatches,
    summed over one strand pair of equal length."""
    p_hat = _strand_points(pred)
    p = _strand_points(gt)
    if p_hat.shape != p.shape:
        raise ValueError("strand pair must share the point count")
    b_hat, g_hat = strand_features(p_hat)
    b, g = strand_features(p)
    return sum(loss_data_terms(p_hat, b_hat, g_hat, p, b, g, lambda_d, lambda_c))


def kl_divergence(z_mu, z_sigma) -> float:
    """Closed-form KL from a diagonal Gaussian to the standard normal,
    summed over the last axis.  Variances are floored at VAR_FLOOR, so a
    collapsed sigma yields a large, finite penalty instead of an infinity."""
    mu = np.asarray(z_mu, dtype=np.float64)
    var = np.maximum(np.asarray(z_sigma, dtype=np.float64) ** 2, VAR_FLOOR)
    out = 0.5 * (var + mu * mu - 1.0 - np.log(var)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def loss_vae(l_data, z_mu, z_sigma, lambda_kl: float = LAMBDA_KL):
    return l_data + lambda_kl * kl_divergence(z_mu, z_sigma)


def reparameterize(z_mu, z_sigma, eps):
    """z = mu + eps * sigma (elementwise); sigma must be non-negative."""
    z_sigma = np.asarray(z_sigma, dtype=np.float64)
    if np.any(z_sigma < 0):
        raise ValueError("sigma must be non-negative")
    return np.asarray(z_mu, dtype=np.float64) + np.asarray(eps) * z_sigma


# tape twins, used when training the reference codec.  The unit-orientation
# and curvature norms carry a 1e-16 floor under the square root so predicted
# strands that momentarily collapse a segment still have finite gradients.

def _features_tape(pts: Var):
    raw = pts[:, 1:] - pts[:, :-1]
    n2 = t.sum_(raw * raw, axis=-1, keepdims=True)
    b = raw / t.sqrt(n2 + 1e-16)
    u, v = b[:, :-1], b[:, 1:]
    cx = u[:, :, 1] * v[:, :, 2] - u[:, :, 2] * v[:, :, 1]
    cy = u[:, :, 2] * v[:, :, 0] - u[:, :, 0] * v[:, :, 2]
    cz = u[:, :, 0] * v[:, :, 1] - u[:, :, 1] * v[:, :, 0]
    g = t.sqrt(cx * cx + cy * cy + cz * cz + 1e-16)
    return b, g


def loss_data_tape(pred: Var, gt: Array, lambda_d: float = LAMBDA_ORIENT,
                   lambda_c: float = LAMBDA_CURV) -> Var:
    """Batch-mean data term for predicted strands (B, L, 3) on the tape."""
    gt = np.asarray(gt, dtype=np.float64)
    gb = np.stack([strand_features(s)[0] for s in gt])
    gg = np.stack([strand_features(s)[1] for s in gt])
    b, g = _features_tape(pred)
    d = pred - gt
    pos = t.sum_(d * d, axis=(1, 2))
    db = b - gb
    orient = t.sum_(db * db, axis=(1, 2)) * 0.5
    dg = g - gg
    curv = t.sum_(dg * dg, axis=-1)
    return t.mean(pos + orient * lambda_d + curv * lambda_c)


def kl_tape(mu: Var, sigma: Var) -> Var:
    var = t.clamp(sigma * sigma, lo=VAR_FLOOR)
    return t.mean(t.sum_(var + mu * mu - 1.0 - t.log(var), axis=-1)) * 0.5


# ---------------------------------------------------------------------------
# geometry texture

@dataclass
class GeometryTexture:
    """H x W grid of strand codes, channel-interleaved."""

    data: Array  # (H, W, C)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("texture must be (H, W, C)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("texture has non-finite entries")

    @property
    def shape(self):
        return self.data.shape

    def save(self, path):
        formats.write_gtex(path, self.data)

    @classmethod
    def load(cls, path) -> "GeometryTexture":
        return cls(formats.read_gtex(path))


def localize_hairstyle(hairstyle: Hairstyle, chart):
    """World strands -> tbn-local strands rooted at their chart UVs.

    Returns (local hairstyle, list of TbnFrame), one frame per strand; the
    frames are what from_local needs to go back to world space.
    """
    if hairstyle.roots is None:
        raise ValueError("hairstyle must carry root UVs")
    frames = [tbn_frame(chart, uv) for uv in hairstyle.roots]
    local = [to_local(s, f) for s, f in zip(hairstyle.strands, frames)]
    return Hairstyle(local, roots=hairstyle.roots.copy()), frames


def bake_texture(hairstyle: Hairstyle, codec, H: int = TEXTURE_RES,
                 W: int = TEXTURE_RES) -> GeometryTexture:
    """Encode every strand and spread the codes over the texture by
    nearest-root lookup in UV.

    Texel (i, j) sits at uv = ((j+0.5)/W, (i+0.5)/H); it takes the code of
    the strand whose root UV is closest.
    """
    if len(hairstyle) == 0:
        raise ValueError("cannot bake an empty hairstyle")
    if hairstyle.roots is None:
        raise ValueError("hairstyle must carry root UVs")
    codes = np.stack([codec.encode(s)[0] for s in hairstyle.strands])
    u = (np.arange(W) + 0.5) / W
    v = (np.arange(H) + 0.5) / H
    gu, gv = np.meshgrid(u, v)
    texels = np.column_stack([gu.ravel(), gv.ravel()])
    _, idx = cKDTree(hairstyle.roots).query(texels)
    return GeometryTexture(codes[idx].reshape(H, W, codes.shape[1]))


def subsample(tex, s_i: int, s_j: int) -> GeometryTexture:
    """Strided 32x32 slice of a 256x256 texture at integer offsets.

    Row/column index sets {s+8q} for the 64 offset pairs partition the
    texture exactly.
    """
    data = tex.data if isinstance(tex, GeometryTexture) else np.asarray(tex)
    if data.shape[0] != TEXTURE_RES or data.shape[1] != TEXTURE_RES:
        raise ValueError("subsample expects a 256x256 texture")
    if not (0 <= s_i < SUBSAMPLE_STRIDE and 0 <= s_j < SUBSAMPLE_STRIDE):
        raise ValueError("offsets must lie in [0, 7]")
    return GeometryTexture(data[s_i::SUBSAMPLE_STRIDE, s_j::SUBSAMPLE_STRIDE])


# ---------------------------------------------------------------------------
# diffusion prior

@dataclass
class EdmParams:
    """Data scale for the preconditioned denoiser coefficient family."""

    sigma_data: float

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")


def sample_sigma(rng, size=None):
    """Noise strengths: ln(sigma) ~ Normal(-1.2, 1.2^2)."""
    return np.exp(rng.normal(SIGMA_LOG_MEAN, SIGMA_LOG_STD, size))


def estimate_sigma_data(textures) -> float:
    """RMS of the per-channel standard deviations over the given textures."""
    if isinstance(textures, (GeometryTexture, np.ndarray)):
        textures = [textures]
    data = [tx.data if isinstance(tx, GeometryTexture) else np.asarray(tx)
            for tx in textures]
    flat = np.concatenate([d.reshape(-1, d.shape[-1]) for d in data])
    stds = flat.std(axis=0)
    out = float(np.sqrt(np.mean(stds ** 2)))
    if out == 0.0:
        raise ValueError("textures are constant: data scale undefined")
    return out


def edm_coefficients(sigma: float, sigma_data: float):
    """(c_skip, c_out, c_in, c_noise) for one noise strength."""
    s2 = sigma * sigma
    d2 = sigma_data * sigma_data
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / np.sqrt(s2 + d2)
    c_in = 1.0 / np.sqrt(s2 + d2)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def edm_weight(sigma: float, sigma_data: float) -> float:
    """Loss weight for one noise strength; weight * c_out^2 == 1."""
    return (sigma * sigma + sigma_data ** 2) / (sigma * sigma_data) ** 2


def edm_precondition(x, sigma: float, params: EdmParams, F):
    """Denoised estimate c_skip*x + c_out*F(c_in*x, c_noise).

    Works on constants and on tape variables alike; F sees whichever kind
    x is.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, params.sigma_data)
    fe = F(x * c_in, c_noise)
    return x * c_skip + fe * c_out


def _sq_sum(r):
    if isinstance(r, Var):
        return t.sum_(r * r)
    return float((np.asarray(r) ** 2).sum())


def loss_diff(y, sigma: float, eps, params: EdmParams, F):
    """Weighted denoising loss for one draw: weight * |D(y+sigma*eps) - y|^2."""
    x = y + eps * sigma
    d = edm_precondition(x, sigma, params, F)
    return _sq_sum(d - y) * edm_weight(sigma, params.sigma_data)


def loss_diff_simplified(y, sigma: float, eps, params: EdmParams, F):
    """Unweighted form |F(c_in*x, c_noise) - (y - c_skip*x)/c_out|^2.

    Algebraically identical to loss_diff because weight * c_out^2 == 1.
    """
    c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, params.sigma_data)
    x = y + eps * sigma
    fe = F(x * c_in, c_noise)
    target = (y - x * c_skip) * (1.0 / c_out)
    return _sq_sum(fe - target)


@dataclass
class PriorGradient:
    grad: Array   # same shape as the texture parameters
    loss: float   # batch-mean weighted denoising loss


def prior_gradient(texture, params: EdmParams, F, mode: str = FULL_BACKPROP,
                   rng=None, batch: int = 4, draws=None) -> PriorGradient:
    """Gradient of the denoising loss w.r.t. the texture values.

    Full-resolution (256x256) textures are subsampled with random offsets
    per draw; anything smaller is used directly.  Each draw is
    (offsets | None, eps, sigma); pass `draws` explicitly for deterministic
    comparisons, otherwise `batch` of them are sampled.

    full_backprop differentiates through the denoiser; sds_identity severs
    the path into F (its input is detached), so only the skip term and the
    direct data term carry gradient.  The two coincide exactly whenever F
    has a zero Jacobian.
    """
    if mode not in (FULL_BACKPROP, SDS_IDENTITY):
        raise ValueError(f"unknown mode {mode!r}")
    tex = texture.data if isinstance(texture, GeometryTexture) else \
        np.asarray(texture, dtype=np.float64)
    H, W, C = tex.shape
    sub = H == TEXTURE_RES and W == TEXTURE_RES
    if draws is None:
        rng = np.random.default_rng(rng)
        shape = (SUBSAMPLE_RES, SUBSAMPLE_RES, C) if sub else (H, W, C)
        draws = [
            (tuple(rng.integers(0, SUBSAMPLE_STRIDE, 2)) if sub else None,
             rng.standard_normal(shape), float(sample_sigma(rng)))
            for _ in range(batch)
        ]
    grad = np.zeros_like(tex)
    total = 0.0
    for off, eps, sigma in draws:
        tape = t.Tape()
        th = tape.leaf(tex)
        if off is not None:
            y = th[off[0]::SUBSAMPLE_STRIDE, off[1]::SUBSAMPLE_STRIDE]
        else:
            y = th
        c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, params.sigma_data)
        x = y + eps * float(sigma)
        u = x * c_in
        if mode == SDS_IDENTITY:
            u = tape.leaf(u.value)
        fe = F(u, c_noise)
        r = x * c_skip + fe * c_out - y
        loss = t.sum_(r * r) * edm_weight(sigma, params.sigma_data)
        grads = tape.backward(loss)
        grad += grads[th.index]
        total += float(loss.value)
    n = len(draws)
    return PriorGradient(grad / n, total / n)


# ---------------------------------------------------------------------------
# sinusoidal-basis codec (linear, exact encode)

class SinusoidalStrandCodec:
    """Linear codec on a fixed sinusoidal offset basis.

    Segment offsets of a strand are Phi @ C with Phi an (L-1, B) basis over
    the normalized segment index and C a (B, 3) coefficient block stored
    row-major in the leading 3B entries of the code; remaining entries are
    zero.  encode is an exact least-squares projection and decode a matrix
    product, so there is no trainable state and fitting through decode is
    well conditioned.  Codes describe shape relative to the root: the
    decoded strand always starts at the origin.
    """

    def __init__(self, length: int, code_dim: int = CODE_DIM):
        if length < 2:
            raise ValueError("codec needs strands of at least 2 points")
        self.length = length
        self.code_dim = code_dim
        n = length - 1
        self.n_basis = min(code_dim // 3, n)
        tau = np.arange(n) / max(n - 1, 1)
        cols = [np.ones(n)]
        k = 1
        while len(cols) < self.n_basis:
            cols.append(np.sin(np.pi * k * tau))
            if len(cols) < self.n_basis:
                cols.append(np.cos(np.pi * k * tau))
            k += 1
        self.basis = np.column_stack(cols)          # (L-1, B)
        self.pinv = np.linalg.pinv(self.basis)      # (B, L-1)
        # flat decode map: code -> interleaved offsets
        M = np.zeros((code_dim, n * 3))
        for ch in range(3):
            M[np.ix_(np.arange(self.n_basis) * 3 + ch,
                     np.arange(n) * 3 + ch)] = self.basis.T
        self.decode_matrix = M

    def encode(self, strand):
        pts = _strand_points(strand)
        if len(pts) != self.length:
            raise ValueError("strand length does not match the codec")
        coeff = self.pinv @ np.diff(pts, axis=0)
        z = np.zeros(self.code_dim)
        z[: 3 * self.n_basis] = coeff.ravel()
        return z, np.zeros(self.code_dim)

    def decode(self, z, l: int):
        """Offset d^l = p^{l+1} - p^l for segment index l in 1..L-1."""
        if not 1 <= l <= self.length - 1:
            raise ValueError("segment index out of range")
        coeff = np.asarray(z)[: 3 * self.n_basis].reshape(self.n_basis, 3)
        return self.basis[l - 1] @ coeff

    def decode_strand(self, z) -> Strand:
        coeff = np.asarray(z)[: 3 * self.n_basis].reshape(self.n_basis, 3)
        return accumulate(self.basis @ coeff)

    def decode_batch(self, Z) -> Array:
        """(N, code_dim) -> (N, L, 3) root-relative points."""
        Z = np.asarray(Z, dtype=np.float64)
        off = (Z @ self.decode_matrix).reshape(len(Z), self.length - 1, 3)
        pts = np.concatenate([np.zeros((len(Z), 1, 3)), np.cumsum(off, axis=1)],
                             axis=1)
        return pts

    def decode_batch_tape(self, Z: Var) -> Var:
        n = Z.shape[0]
        off = t.reshape(t.matmul(Z, self.decode_matrix),
                        (n, self.length - 1, 3))
        return t.concatenate([np.zeros((n, 1, 3)), t.cumsum(off, axis=1)],
                             axis=1)


# ---------------------------------------------------------------------------
# reference networks

OMEGA0 = 30.0


class ReferenceStrandCodec:
    """Miniature trainable codec: a strided 1D conv encoder and a modulated
    sinusoidal decoder (2 sine layers x 32 units), all on the tape.

    A production-scale version of the same structure would use an 8-layer
    256-wide decoder pair and a deep residual encoder; this one keeps the
    architecture at a size where desk tests train in seconds.
    """

    HIDDEN = 32

    def __init__(self, length: int, code_dim: int = CODE_DIM, rng=None):
        sizes = []
        n = length
        for _ in range(3):
            n = (n - 5) // 2 + 1
            sizes.append(n)
        if sizes[-1] < 1:
            raise ValueError("strand length too short for the encoder")
        self.length = length
        self.code_dim = code_dim
        rng = np.random.default_rng(rng)
        h = self.HIDDEN

        def conv_w(o, c, k):
            return rng.standard_normal((o, c, k)) * np.sqrt(2.0 / (c * k))

        w = {
            "e1w": conv_w(16, 3, 5), "e1b": np.zeros(16),
            "e2w": conv_w(32, 16, 5), "e2b": np.zeros(32),
            "e3w": conv_w(32, 32, 5), "e3b": np.zeros(32),
            "emw": rng.standard_normal((32, 2 * code_dim)) * np.sqrt(1.0 / 32),
            "emb": np.zeros(2 * code_dim),
            "mw": rng.standard_normal((code_dim, h)) * np.sqrt(2.0 / code_dim),
            "mb": np.zeros(h),
            "m1w": rng.standard_normal((h, h)) * np.sqrt(1.0 / h),
            "m1b": np.zeros(h),
            "m2w": rng.standard_normal((h, h)) * np.sqrt(1.0 / h),
            "m2b": np.zeros(h),
            "s1w": rng.uniform(-1.0, 1.0, h),
            "s1b": rng.uniform(-1.0, 1.0, h),
            "s2w": rng.uniform(-np.sqrt(6.0 / h), np.sqrt(6.0 / h), (h, h)) / OMEGA0,
            "s2b": np.zeros(h),
            "ow": rng.standard_normal((h, 3)) * (0.01 / np.sqrt(h)),
            "ob": np.zeros(3),
        }
        # start the posterior narrow so early reconstruction is not noise-bound
        w["emb"][code_dim:] = -3.0
        self.weights = w

    def leaf_params(self, tape: t.Tape) -> dict:
        return {k: tape.leaf(v) for k, v in self.weights.items()}

    def encode_batch_tape(self, tape: t.Tape, pts: Array, P: dict):
        """(B, L, 3) constant points -> (mu, log_sigma) Vars of (B, code_dim)."""
        x = tape.leaf(np.swapaxes(np.asarray(pts, dtype=np.float64), 1, 2))
        h = t.relu(t.conv1d(x, P["e1w"], P["e1b"], stride=2))
        h = t.relu(t.conv1d(h, P["e2w"], P["e2b"], stride=2))
        h = t.relu(t.conv1d(h, P["e3w"], P["e3b"], stride=2))
        pooled = t.mean(h, axis=2)
        zz = t.matmul(pooled, P["emw"]) + P["emb"]
        return zz[:, : self.code_dim], zz[:, self.code_dim:]

    def decode_batch_tape(self, Z: Var, P: dict | None = None) -> Var:
        """(B, code_dim) codes -> (B, L, 3) root-relative points."""
        P = self.weights if P is None else P
        B = Z.shape[0]
        n = self.length - 1
        h = self.HIDDEN
        hm = t.relu(t.matmul(Z, P["mw"]) + P["mb"])
        sh1 = t.reshape(t.matmul(hm, P["m1w"]) + P["m1b"], (B, 1, h))
        sh2 = t.reshape(t.matmul(hm, P["m2w"]) + P["m2b"], (B, 1, h))
        tau = (np.arange(n) / max(n - 1, 1))[:, None]  # (n, 1)
        if isinstance(P["s1w"], Var):
            pre1 = t.reshape(P["s1w"], (1, h)) * tau + P["s1b"]
        else:
            pre1 = P["s1w"][None, :] * tau + P["s1b"]
        h1 = t.sin(pre1 * OMEGA0 + sh1)              # (B, n, h)
        pre2 = t.matmul(h1, P["s2w"]) + P["s2b"]
        h2 = t.sin(pre2 * OMEGA0 + sh2)
        off = t.matmul(h2, P["ow"]) + P["ob"]
        return t.concatenate([np.zeros((B, 1, 3)), t.cumsum(off, axis=1)],
                             axis=1)

    def encode(self, strand):
        pts = _strand_points(strand)
        if len(pts) != self.length:
            raise ValueError("strand length does not match the codec")
        tape = t.Tape()
        P = self.leaf_params(tape)
        mu, log_sigma = self.encode_batch_tape(tape, pts[None], P)
        return mu.value[0].copy(), np.exp(log_sigma.value[0])

    def decode(self, z, l: int):
        if not 1 <= l <= self.length - 1:
            raise ValueError("segment index out of range")
        pts = self.decode_batch(np.asarray(z)[None])[0]
        return pts[l] - pts[l - 1]

    def decode_batch(self, Z) -> Array:
        tape = t.Tape()
        zv = tape.leaf(np.asarray(Z, dtype=np.float64))
        return self.decode_batch_tape(zv).value.copy()

    def decode_strand(self, z) -> Strand:
        return Strand(self.decode_batch(np.asarray(z)[None])[0], frame=LOCAL)

    def save(self, path):
        formats.write_wgts(path, self.weights)

    def load(self, path):
        stored = formats.read_wgts(path)
        if set(stored) != set(self.weights):
            raise ValueError("weight container does not match the codec")
        self.weights = stored


def train_codec_vae(codec: ReferenceStrandCodec, strands, steps: int,
                    lr: float = 1e-3, rng=None,
                    lambda_kl: float = LAMBDA_KL) -> list:
    """Joint reconstruction + KL training; returns the per-step loss history."""
    from .optim import Adam

    pts = strands if isinstance(strands, np.ndarray) else \
        np.stack([_strand_points(s) for s in strands])
    rng = np.random.default_rng(rng)
    names = list(codec.weights)
    opt = Adam([codec.weights[k] for k in names], lr=lr)
    history = []
    for _ in range(steps):
        tape = t.Tape()
        P = codec.leaf_params(tape)
        mu, log_sigma = codec.encode_batch_tape(tape, pts, P)
        sigma = t.exp(log_sigma)
        eps = rng.standard_normal(mu.shape)
        z = mu + sigma * eps
        pred = codec.decode_batch_tape(z, P)
        total = loss_data_tape(pred, pts) + kl_tape(mu, sigma) * lambda_kl
        grads = tape.backward(total)
        opt.step([grads[P[k].index] for k in names])
        history.append(float(total.value))
    return history


class ReferenceDenoiser:
    """Two-level convolutional encoder-decoder with a skip connection.

    Input (H, W, C) with H, W even; the noise embedding enters as one extra
    constant channel.  Frozen evaluation reads the stored weights as
    constants, so calling it inside a fitting tape adds no parameter
    gradients; training leafs the weights explicitly.
    """

    def __init__(self, channels: int = CODE_DIM, hidden: int = 16, rng=None):
        rng = np.random.default_rng(rng)
        h = hidden

        def conv_w(o, c):
            return rng.standard_normal((o, c, 3, 3)) * np.sqrt(2.0 / (c * 9))

        self.channels = channels
        self.hidden = hidden
        self.weights = {
            "c1w": conv_w(h, channels + 1), "c1b": np.zeros(h),
            "c2w": conv_w(2 * h, h), "c2b": np.zeros(2 * h),
            "c3w": conv_w(2 * h, 2 * h), "c3b": np.zeros(2 * h),
            "c4w": conv_w(h, 3 * h), "c4b": np.zeros(h),
            "c5w": conv_w(channels, h) * 0.1, "c5b": np.zeros(channels),
        }

    def leaf_params(self, tape: t.Tape) -> dict:
        return {k: tape.leaf(v) for k, v in self.weights.items()}

    def _forward(self, u: Var, c_noise: float, P: dict) -> Var:
        H, W, C = u.shape
        if C != self.channels:
            raise ValueError("channel count does not match the denoiser")
        if H % 2 or W % 2:
            raise ValueError("input sides must be even")
        x = t.reshape(t.moveaxis(u, 2, 0), (1, C, H, W))
        x = t.concatenate([x, np.full((1, 1, H, W), float(c_noise))], axis=1)
        e1 = t.relu(t.conv2d(x, P["c1w"], P["c1b"], stride=1, pad=1))
        dn = t.relu(t.conv2d(e1, P["c2w"], P["c2b"], stride=2, pad=1))
        bt = t.relu(t.conv2d(dn, P["c3w"], P["c3b"], stride=1, pad=1))
        up = t.upsample2_nearest(bt)
        cat = t.concatenate([up, e1], axis=1)
        o = t.relu(t.conv2d(cat, P["c4w"], P["c4b"], stride=1, pad=1))
        out = t.conv2d(o, P["c5w"], P["c5b"], stride=1, pad=1)
        return t.moveaxis(t.reshape(out, (C, H, W)), 0, 2)

    def __call__(self, u, c_noise: float):
        if isinstance(u, Var):
            return self._forward(u, c_noise, self.weights)
        tape = t.Tape()
        uv = tape.leaf(np.asarray(u, dtype=np.float64))
        return self._forward(uv, c_noise, self.weights).value.copy()

    def save(self, path):
        formats.write_wgts(path, self.weights)

    def load(self, path):
        stored = formats.read_wgts(path)
        if set(stored) != set(self.weights):
            raise ValueError("weight container does not match the denoiser")
        self.weights = stored


def train_denoiser(denoiser: ReferenceDenoiser, textures, params: EdmParams,
                   steps: int, lr: float = 1e-3, rng=None) -> list:
    """Denoising-loss training over low-resolution textures; returns the
    per-step loss history."""
    from .optim import Adam

    data = [tx.data if isinstance(tx, GeometryTexture) else
            np.asarray(tx, dtype=np.float64) for tx in textures]
    if not data:
        raise ValueError("no training textures")
    rng = np.random.default_rng(rng)
    names = list(denoiser.weights)
    opt = Adam([denoiser.weights[k] for k in names], lr=lr)
    history = []
    for _ in range(steps):
        y = data[int(rng.integers(len(data)))]
        sigma = float(sample_sigma(rng))
        eps = rng.standard_normal(y.shape)
        tape = t.Tape()
        P = denoiser.leaf_params(tape)

        def F(u, cn):
            uv = u if isinstance(u, Var) else tape.leaf(np.asarray(u))
            return denoiser._forward(uv, cn, P)

        loss = loss_diff(y, sigma, eps, params, F)
        grads = tape.backward(loss)
        opt.step([grads[P[k].index] for k in names])
        history.append(float(loss.value))
    return history
