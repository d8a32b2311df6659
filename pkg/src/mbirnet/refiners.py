"""Image-refining networks and their empirical convergence diagnostics.

Three refiner families operate on 2-D images via circular convolution:

* ``ScnnRefiner``   - residual single-hidden-layer convolutional autoencoder
                      with exp-parameterized soft thresholds,
* ``DcnnRefiner``   - residual multi-layer CNN with ReLU feature maps,
* ``TiedCaolRefiner`` - tied encoder/decoder autoencoder whose decoder is the
                      flipped encoder bank; with a tight-frame bank this is the
                      exact proximal update of the convolutional sparse prior.

All refiners are immutable value objects; calling one applies the forward map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linops import ShapeError, _frozen, as_f64
from .prox import soft_threshold

# exp(log_threshold) is floored here so that a requested exact-zero threshold
# still yields a strictly positive shrinkage parameter
THRESHOLD_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# circular convolution helpers
# ---------------------------------------------------------------------------

def embed_filters(filters: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Embed a (K, r, r) filter stack at centered offsets modulo `shape`."""
    filters = np.atleast_3d(filters)
    k, rh, rw = filters.shape
    h, w = shape
    if rh > h or rw > w:
        raise ShapeError(f"filters {filters.shape[1:]} larger than image {shape}")
    out = np.zeros((k, h, w))
    rows = (np.arange(rh) - rh // 2) % h
    cols = (np.arange(rw) - rw // 2) % w
    out[:, rows[:, None], cols[None, :]] = filters
    return out


def filter_fft(filters: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """rfft2 of the embedded filter stack."""
    return np.fft.rfft2(embed_filters(filters, shape), axes=(-2, -1))


def conv_stack(fhat: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Circularly convolve one image with a stack of filters given in Fourier."""
    uhat = np.fft.rfft2(u)
    return np.fft.irfft2(fhat * uhat, s=u.shape, axes=(-2, -1))


def flip_filter(filt: np.ndarray) -> np.ndarray:
    """Reverse a filter along each spatial dimension."""
    return np.atleast_2d(filt)[::-1, ::-1].copy()


def tf_defect(filters: np.ndarray) -> float:
    """Deviation of the tap-level Gram sum_k h_k h_k^T from I/R.

    Zero defect is equivalent to the tight-frame identity
    sum_k ||h_k conv u||^2 = ||u||^2 under circular convolution.
    """
    filters = np.atleast_3d(filters)
    k = filters.shape[0]
    r = filters.shape[1] * filters.shape[2]
    v = filters.reshape(k, r)
    gram = v.T @ v
    return float(np.max(np.abs(gram - np.eye(r) / r)))


def make_tf_filterbank(R: int) -> np.ndarray:
    """Tight-frame bank of K = R filters of size sqrt(R) x sqrt(R).

    The filters are the 2-D separable orthonormal DCT basis scaled by
    1/sqrt(R), so the tap Gram is exactly I/R.
    """
    r = math.isqrt(R)
    if r * r != R:
        raise ValueError(f"filter size R={R} must be a perfect square")
    n = np.arange(r)
    basis = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * r))
    basis *= np.sqrt(2.0 / r)
    basis[0] = np.sqrt(1.0 / r)
    filters = np.einsum("ai,bj->abij", basis, basis).reshape(R, r, r)
    return filters / np.sqrt(R)


def _square_side(filters: np.ndarray) -> int:
    return filters.shape[1]


# ---------------------------------------------------------------------------
# refiners
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScnnRefiner:
    """Residual single-hidden-layer convolutional autoencoder.

    Forward map: sum_k d_k conv T_{exp(alpha_k)}(e_k conv u)  (+ u if residual).
    Thresholds are stored as log-values alpha_k and applied as exp(alpha_k),
    which keeps them positive throughout training.
    """

    enc_filters: np.ndarray   # (K, r, r)
    dec_filters: np.ndarray   # (K, r, r)
    log_thresholds: np.ndarray  # (K,)
    residual: bool = True

    def __post_init__(self):
        enc = _frozen(np.atleast_3d(self.enc_filters))
        dec = _frozen(np.atleast_3d(self.dec_filters))
        thr = _frozen(np.ravel(self.log_thresholds))
        object.__setattr__(self, "enc_filters", enc)
        object.__setattr__(self, "dec_filters", dec)
        object.__setattr__(self, "log_thresholds", thr)
        if enc.shape != dec.shape:
            raise ShapeError("encoder and decoder banks must share (K, r, r)")
        if thr.size != enc.shape[0]:
            raise ShapeError("one threshold per filter pair required")

    @property
    def n_filters(self) -> int:
        return self.enc_filters.shape[0]

    @property
    def filter_size(self) -> int:
        r = _square_side(self.enc_filters)
        return r * r

    @property
    def thresholds(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_thresholds), THRESHOLD_FLOOR)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = as_f64(u)
        code = conv_stack(filter_fft(self.enc_filters, u.shape), u)
        hidden = soft_threshold(code, self.thresholds[:, None, None])
        dhat = filter_fft(self.dec_filters, u.shape)
        out = np.fft.irfft2(np.sum(dhat * np.fft.rfft2(hidden, axes=(-2, -1)), axis=0), s=u.shape)
        return out + u if self.residual else out

    @classmethod
    def init_random(cls, K: int, R: int, rng: np.random.Generator,
                    residual: bool = True, init_threshold: float = 1e-2) -> "ScnnRefiner":
        """Fan-in-scaled uniform filters, thresholds at log(init_threshold)."""
        r = math.isqrt(R)
        if r * r != R:
            raise ValueError("R must be a perfect square")
        bound = math.sqrt(6.0 / R)
        enc = rng.uniform(-bound, bound, size=(K, r, r))
        dec = rng.uniform(-bound, bound, size=(K, r, r))
        thr = np.full(K, math.log(init_threshold))
        return cls(enc, dec, thr, residual)


@dataclass(frozen=True)
class DcnnRefiner:
    """Residual multi-layer CNN: u - sum_k e_k^[L] conv u_k^[L-1].

    Feature maps pass through ReLU between layers; no pooling, no
    normalization layers.  ``mid_filters`` is empty for L = 2.
    """

    first_filters: np.ndarray  # (K, r, r)
    mid_filters: np.ndarray    # (L-2, K, K, r, r)
    last_filters: np.ndarray   # (K, r, r)

    def __post_init__(self):
        first = _frozen(np.atleast_3d(self.first_filters))
        last = _frozen(np.atleast_3d(self.last_filters))
        k, rh, rw = first.shape
        mid = as_f64(self.mid_filters)
        if mid.size == 0:
            mid = np.zeros((0, k, k, rh, rw))
        mid = _frozen(mid)
        object.__setattr__(self, "first_filters", first)
        object.__setattr__(self, "mid_filters", mid)
        object.__setattr__(self, "last_filters", last)
        if last.shape != first.shape:
            raise ShapeError("first and last layers must share (K, r, r)")
        if mid.shape[1:] != (k, k, rh, rw):
            raise ShapeError("middle layers must have shape (L-2, K, K, r, r)")

    @property
    def n_layers(self) -> int:
        return self.mid_filters.shape[0] + 2

    @property
    def n_filters(self) -> int:
        return self.first_filters.shape[0]

    @property
    def filter_size(self) -> int:
        r = _square_side(self.first_filters)
        return r * r

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = as_f64(u)
        shape = u.shape
        feat = np.maximum(conv_stack(filter_fft(self.first_filters, shape), u), 0.0)
        for layer in self.mid_filters:
            fhat = np.stack([filter_fft(layer[k], shape) for k in range(self.n_filters)])
            feat_hat = np.fft.rfft2(feat, axes=(-2, -1))
            mixed = np.einsum("kcab,cab->kab", fhat, feat_hat)
            feat = np.maximum(np.fft.irfft2(mixed, s=shape, axes=(-2, -1)), 0.0)
        lhat = filter_fft(self.last_filters, shape)
        correction = np.fft.irfft2(np.sum(lhat * np.fft.rfft2(feat, axes=(-2, -1)), axis=0), s=shape)
        return u - correction

    @classmethod
    def init_random(cls, K: int, R: int, L: int, rng: np.random.Generator) -> "DcnnRefiner":
        r = math.isqrt(R)
        if r * r != R:
            raise ValueError("R must be a perfect square")
        if L < 2:
            raise ValueError("dCNN needs at least 2 layers")
        b1 = math.sqrt(6.0 / R)
        bm = math.sqrt(6.0 / (K * R))
        first = rng.uniform(-b1, b1, size=(K, r, r))
        mid = rng.uniform(-bm, bm, size=(L - 2, K, K, r, r))
        last = rng.uniform(-bm, bm, size=(K, r, r))
        return cls(first, mid, last)


@dataclass(frozen=True)
class TiedCaolRefiner:
    """Tied autoencoder sum_k flip(h_k*) conv T_{beta_k}(h_k conv u).

    With a tight-frame bank and all-zero thresholds this is the identity map;
    the solver's sparse-prior oracle requires the tight-frame flag.
    """

    filters: np.ndarray      # (K, r, r)
    thresholds: np.ndarray   # (K,)
    tight_frame: bool = True

    def __post_init__(self):
        filters = _frozen(np.atleast_3d(self.filters))
        thr = _frozen(np.ravel(self.thresholds))
        object.__setattr__(self, "filters", filters)
        object.__setattr__(self, "thresholds", thr)
        if thr.size != filters.shape[0]:
            raise ShapeError("one threshold per filter required")
        if np.any(thr < 0):
            raise ValueError("thresholds must be nonnegative")
        if self.tight_frame and tf_defect(filters) > 1e-10:
            raise ValueError("filter bank violates the tight-frame identity")

    @property
    def n_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def filter_size(self) -> int:
        r = _square_side(self.filters)
        return r * r

    def codes(self, u: np.ndarray) -> np.ndarray:
        """Thresholded analysis coefficients T_beta(h_k conv u)."""
        u = as_f64(u)
        code = conv_stack(filter_fft(self.filters, u.shape), u)
        return soft_threshold(code, self.thresholds[:, None, None])

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = as_f64(u)
        hhat = filter_fft(self.filters, u.shape)
        hidden = self.codes(u)
        # flip(conj(h)) in the spatial domain is conj(H) in Fourier
        return np.fft.irfft2(np.sum(np.conj(hhat) * np.fft.rfft2(hidden, axes=(-2, -1)), axis=0),
                             s=u.shape)


class IdentityRefiner:
    """Refiner that returns its input; the refiner-free baseline."""

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return as_f64(u).copy()


# ---------------------------------------------------------------------------
# empirical diagnostics
# ---------------------------------------------------------------------------

def paired_epsilon(r_next, r_prev, pairs) -> float:
    """Empirical slack of the paired-nonexpansiveness bound over sample pairs.

    Returns max over (u, v) of max(0, ||r_next(u) - r_prev(v)||^2 - ||u - v||^2).
    """
    if len(pairs) == 0:
        raise ValueError("need at least one (u, v) pair")
    worst = 0.0
    for u, v in pairs:
        u = as_f64(u)
        v = as_f64(v)
        d_out = r_next(u) - r_prev(v)
        gap = float(np.sum(d_out * d_out) - np.sum((u - v) ** 2))
        worst = max(worst, gap)
    return max(worst, 0.0)


def delta_measure(z_next, z_prev, x) -> float:
    """Empirical slack of the block-coordinate-minimizer bound."""
    z_next = as_f64(z_next)
    z_prev = as_f64(z_prev)
    x = as_f64(x)
    if z_next.shape != z_prev.shape or z_next.shape != x.shape:
        raise ShapeError("delta_measure arguments must share one shape")
    gap = float(np.sum((z_next - x) ** 2) - np.sum((z_prev - x) ** 2))
    return max(gap, 0.0)


def lipschitz_estimate(refiner, samples) -> float:
    """Empirical Lipschitz constant max ||R(u) - R(v)|| / ||u - v||."""
    if len(samples) == 0:
        raise ValueError("need at least one (u, v) pair")
    worst = 0.0
    for u, v in samples:
        u = as_f64(u)
        v = as_f64(v)
        denom = float(np.linalg.norm(u - v))
        if denom == 0.0:
            raise ValueError("coincident sample pair")
        worst = max(worst, float(np.linalg.norm(refiner(u) - refiner(v))) / denom)
    return worst


@dataclass(frozen=True)
class NonexpansiveReport:
    passes: bool
    enc_sigma_max: float
    dec_sigma_max: float
    bound: float


def scnn_nonexpansive_sufficient(refiner: ScnnRefiner) -> NonexpansiveReport:
    """Sufficient spectral condition for (asymptotic) non-expansiveness.

    Builds the (K+1)-column matrices [d_1 ... d_K delta] and [e_1 ... e_K delta]
    (delta = Kronecker-delta filter) and compares the top eigenvalue of each
    Gram matrix against 1/R.
    """
    K = refiner.n_filters
    R = refiner.filter_size
    r = _square_side(refiner.enc_filters)
    delta_col = np.zeros(R)
    delta_col[(r // 2) * r + (r // 2)] = 1.0

    def top_eig(bank: np.ndarray) -> float:
        cols = np.column_stack([bank.reshape(K, R).T, delta_col])
        return float(np.linalg.eigvalsh(cols.T @ cols)[-1])

    enc_top = top_eig(np.asarray(refiner.enc_filters))
    dec_top = top_eig(np.asarray(refiner.dec_filters))
    bound = 1.0 / R
    return NonexpansiveReport(enc_top <= bound and dec_top <= bound, enc_top, dec_top, bound)


# ---------------------------------------------------------------------------
# serialization (bit-exact round trip)
# ---------------------------------------------------------------------------

_MAGIC = b"MBIRNET-REFINER v1\n"


def save_refiner(path, refiner) -> None:
    """Write a refiner to a small versioned binary container."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        if isinstance(refiner, ScnnRefiner):
            fh.write(f"scnn {refiner.n_filters} {refiner.filter_size} "
                     f"{int(refiner.residual)}\n".encode())
            payload = (refiner.enc_filters, refiner.dec_filters, refiner.log_thresholds)
        elif isinstance(refiner, DcnnRefiner):
            fh.write(f"dcnn {refiner.n_filters} {refiner.filter_size} "
                     f"{refiner.n_layers}\n".encode())
            payload = (refiner.first_filters, refiner.mid_filters, refiner.last_filters)
        elif isinstance(refiner, TiedCaolRefiner):
            fh.write(f"tied {refiner.n_filters} {refiner.filter_size} "
                     f"{int(refiner.tight_frame)}\n".encode())
            payload = (refiner.filters, refiner.thresholds)
        else:
            raise TypeError(f"cannot serialize refiner of type {type(refiner).__name__}")
        for arr in payload:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_refiner(path):
    """Read a refiner written by `save_refiner`."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a refiner container")
        header = fh.readline().decode().split()
        blob = fh.read()
    kind, K, R = header[0], int(header[1]), int(header[2])
    r = math.isqrt(R)

    def take(count, offset):
        end = offset + 8 * count
        return np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64), end

    if kind == "scnn":
        residual = bool(int(header[3]))
        enc, off = take(K * R, 0)
        dec, off = take(K * R, off)
        thr, off = take(K, off)
        return ScnnRefiner(enc.reshape(K, r, r), dec.reshape(K, r, r), thr, residual)
    if kind == "dcnn":
        L = int(header[3])
        first, off = take(K * R, 0)
        mid, off = take((L - 2) * K * K * R, off)
        last, off = take(K * R, off)
        return DcnnRefiner(first.reshape(K, r, r),
                           mid.reshape(L - 2, K, K, r, r),
                           last.reshape(K, r, r))
    if kind == "tied":
        tf_flag = bool(int(header[3]))
        filters, off = take(K * R, 0)
        thr, off = take(K, off)
        return TiedCaolRefiner(filters.reshape(K, r, r), thr, tf_flag)
    raise ValueError(f"{path}: unknown refiner type tag {kind!r}")
