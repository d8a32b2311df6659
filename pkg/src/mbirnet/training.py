"""Greedy stage-wise refiner training.

Each reconstruction iteration gets its own refiner, trained to map the current
sample states to the ground-truth images (mean squared residual loss), after
which every sample advances one solver iteration with the freshly trained
refiner.  Gradients through the networks are computed analytically (FFT-domain
circular convolutions; subgradient 0 at soft-threshold kinks and at ReLU(0))
and fed to a built-in adaptive-moment optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .linops import (DiagonalMajorizer, ImageVector, QuadraticDataFit, ShapeError,
                     as_f64, diag_majorizer, spectral_spread)
from .prox import soft_threshold
from .refiners import (THRESHOLD_FLOOR, DcnnRefiner, ScnnRefiner, filter_fft,
                       flip_filter)
from .solver import MomentumNetConfig, MomentumState, momentum_net_step


class TrainingAborted(RuntimeError):
    """Loss became non-finite; `history` carries the per-epoch losses so far."""

    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------------
# configuration and sample container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch optimizer settings.

    Learning rates follow the two-group convention (filters vs. thresholds)
    and decay by `lr_decay` every 10 epochs.
    """

    batch_size: int
    epochs: int
    lr_filters: float = 1e-3
    lr_thresholds: float = 1e-1
    lr_decay: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_filters < 0 or self.lr_thresholds < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0.0 <= self.lr_decay < 1.0:
            raise ValueError("lr_decay is a fraction in [0, 1)")

    def lr_at(self, base: float, epoch: int) -> float:
        return base * (1.0 - self.lr_decay) ** (epoch // 10)


@dataclass(frozen=True)
class TrainingSample:
    """One supervised sample: truth image, its data fit, and solver metric."""

    truth: ImageVector
    datafit: QuadraticDataFit
    gamma: float
    majorizer: DiagonalMajorizer  # metric for grad F, i.e. data-fit diag + gamma
    x0: Optional[ImageVector] = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.truth.size != self.datafit.n:
            raise ShapeError("truth size must match operator input dim")
        if self.majorizer.diag.size != self.datafit.n:
            raise ShapeError("majorizer size must match operator input dim")

    @property
    def measurements(self) -> np.ndarray:
        return self.datafit.measurements

    @classmethod
    def build(cls, truth: ImageVector, datafit: QuadraticDataFit, chi: float,
              lam: float = 1.0, x0: Optional[ImageVector] = None) -> "TrainingSample":
        m_f = diag_majorizer(datafit)
        gamma = select_gamma(m_f, chi)
        return cls(truth, datafit, gamma, m_f.shifted(gamma, lam=lam), x0)


def select_gamma(m_f: DiagonalMajorizer, chi: float) -> float:
    """Proximity weight from the spectral spread of the data-fit majorizer.

    A scaled-identity majorizer has zero spread; the fallback scales gamma to
    the majorizer magnitude instead so the weight stays positive.
    """
    if chi <= 0:
        raise ValueError("chi must be > 0")
    spread = spectral_spread(m_f)
    if spread > 0:
        return spread / chi
    return float(np.max(m_f.diag)) / chi


def refining_loss(refiner, pairs) -> float:
    """Mean squared refiner residual (1/2S) sum_s ||truth_s - R(input_s)||^2."""
    if len(pairs) == 0:
        raise ValueError("need at least one (truth, input) pair")
    total = 0.0
    for truth, inp in pairs:
        r = as_f64(truth) - refiner(as_f64(inp))
        total += float(np.sum(r * r))
    return 0.5 * total / len(pairs)


# ---------------------------------------------------------------------------
# analytic gradients
# ---------------------------------------------------------------------------

def _extract_taps(full: np.ndarray, rh: int, rw: int) -> np.ndarray:
    """Read filter-tap gradients back out of full-size correlation images."""
    h, w = full.shape[-2:]
    rows = (np.arange(rh) - rh // 2) % h
    cols = (np.arange(rw) - rw // 2) % w
    return full[..., rows[:, None], cols[None, :]]


def scnn_value_and_grad(enc: np.ndarray, dec: np.ndarray, log_thr: np.ndarray,
                        residual: bool, inputs: np.ndarray, targets: np.ndarray):
    """Batched loss and analytic parameter gradients for the sCNN refiner.

    inputs/targets have shape (B, h, w); the loss is (1/2B) of the summed
    squared residual, matching the per-sample training objective.
    """
    b, h, w = inputs.shape
    shape = (h, w)
    rh, rw = enc.shape[1], enc.shape[2]
    thr = np.maximum(np.exp(log_thr), THRESHOLD_FLOOR)
    # thresholds pinned at the floor no longer respond to their log-parameter
    dthr = np.where(np.exp(log_thr) >= THRESHOLD_FLOOR, np.exp(log_thr), 0.0)

    ehat = filter_fft(enc, shape)
    dhat = filter_fft(dec, shape)
    uhat = np.fft.rfft2(inputs, axes=(-2, -1))

    code = np.fft.irfft2(ehat[:, None] * uhat[None], s=shape, axes=(-2, -1))
    tcol = thr[:, None, None, None]
    mask = np.abs(code) > tcol
    sgn = np.sign(code)
    hidden = np.where(mask, code - tcol * sgn, 0.0)
    hhat = np.fft.rfft2(hidden, axes=(-2, -1))
    out = np.fft.irfft2(np.sum(dhat[:, None] * hhat, axis=0), s=shape, axes=(-2, -1))
    if residual:
        out = out + inputs
    resid = out - targets
    loss = 0.5 * float(np.sum(resid * resid)) / b

    g = resid / b
    ghat = np.fft.rfft2(g, axes=(-2, -1))
    g_dec = _extract_taps(
        np.fft.irfft2(np.conj(hhat) * ghat[None], s=shape, axes=(-2, -1)).sum(axis=1), rh, rw)
    g_hidden = np.fft.irfft2(np.conj(dhat)[:, None] * ghat[None], s=shape, axes=(-2, -1))
    g_thr = -dthr * np.sum(g_hidden * np.where(mask, sgn, 0.0), axis=(1, 2, 3))
    g_code_hat = np.fft.rfft2(np.where(mask, g_hidden, 0.0), axes=(-2, -1))
    g_enc = _extract_taps(
        np.fft.irfft2(np.conj(uhat)[None] * g_code_hat, s=shape, axes=(-2, -1)).sum(axis=1), rh, rw)
    return loss, {"enc": g_enc, "dec": g_dec, "thr": g_thr}


def dcnn_value_and_grad(first: np.ndarray, mid: np.ndarray, last: np.ndarray,
                        inputs: np.ndarray, targets: np.ndarray):
    """Batched loss and analytic parameter gradients for the dCNN refiner."""
    b, h, w = inputs.shape
    shape = (h, w)
    k = first.shape[0]
    rh, rw = first.shape[1], first.shape[2]
    n_mid = mid.shape[0]

    uhat = np.fft.rfft2(inputs, axes=(-2, -1))
    fhat = filter_fft(first, shape)
    pre = np.fft.irfft2(fhat[:, None] * uhat[None], s=shape, axes=(-2, -1))
    feats = [np.maximum(pre, 0.0)]
    masks = [pre > 0]
    mhats = []
    feat_hats = [np.fft.rfft2(feats[0], axes=(-2, -1))]
    for li in range(n_mid):
        mhat = np.stack([filter_fft(mid[li, kk], shape) for kk in range(k)])  # (K, K, h, wr)
        mhats.append(mhat)
        pre = np.fft.irfft2(np.einsum("kcab,cnab->knab", mhat, feat_hats[-1]),
                            s=shape, axes=(-2, -1))
        feats.append(np.maximum(pre, 0.0))
        masks.append(pre > 0)
        feat_hats.append(np.fft.rfft2(feats[-1], axes=(-2, -1)))
    lhat = filter_fft(last, shape)
    out = inputs - np.fft.irfft2(np.sum(lhat[:, None] * feat_hats[-1], axis=0),
                                 s=shape, axes=(-2, -1))
    resid = out - targets
    loss = 0.5 * float(np.sum(resid * resid)) / b

    g = resid / b
    ghat = np.fft.rfft2(g, axes=(-2, -1))
    g_last = -_extract_taps(
        np.fft.irfft2(np.conj(feat_hats[-1]) * ghat[None], s=shape, axes=(-2, -1)).sum(axis=1),
        rh, rw)
    g_feat = -np.fft.irfft2(np.conj(lhat)[:, None] * ghat[None], s=shape, axes=(-2, -1))
    g_mid = np.zeros_like(mid)
    for li in range(n_mid - 1, -1, -1):
        g_pre_hat = np.fft.rfft2(np.where(masks[li + 1], g_feat, 0.0), axes=(-2, -1))
        corr = np.fft.irfft2(np.conj(feat_hats[li])[None] * g_pre_hat[:, None],
                             s=shape, axes=(-2, -1))  # (K, K, B, h, w)
        g_mid[li] = _extract_taps(corr.sum(axis=2), rh, rw)
        g_feat = np.fft.irfft2(np.einsum("kcab,knab->cnab", np.conj(mhats[li]), g_pre_hat),
                               s=shape, axes=(-2, -1))
    g_pre_hat = np.fft.rfft2(np.where(masks[0], g_feat, 0.0), axes=(-2, -1))
    g_first = _extract_taps(
        np.fft.irfft2(np.conj(uhat)[None] * g_pre_hat, s=shape, axes=(-2, -1)).sum(axis=1), rh, rw)
    return loss, {"first": g_first, "mid": g_mid, "last": g_last}


# ---------------------------------------------------------------------------
# adaptive-moment optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Plain adaptive-moment optimizer (decay 0.9/0.999, epsilon 1e-8)."""

    def __init__(self, params: dict[str, np.ndarray], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, p in params.items():
            g = grads[key]
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            p -= lrs[key] * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _stack_pairs(pairs):
    targets = np.stack([as_f64(t) for t, _ in pairs])
    inputs = np.stack([as_f64(u) for _, u in pairs])
    if targets.shape != inputs.shape:
        raise ShapeError("truth/input stacks must share one shape")
    return targets, inputs


def train_refiner(init, pairs, config: TrainConfig, rng: Optional[np.random.Generator] = None):
    """Fit one refiner to (truth, input) pairs; returns (refiner, loss history).

    The history holds the full-data loss after each epoch.  Mini-batches are
    reshuffled per epoch from the configured seed, so a fixed seed gives
    bit-reproducible parameters.
    """
    targets, inputs = _stack_pairs(pairs)
    n_samples = targets.shape[0]
    if rng is None:
        rng = np.random.default_rng(config.seed)

    if isinstance(init, ScnnRefiner):
        params = {"enc": np.array(init.enc_filters), "dec": np.array(init.dec_filters),
                  "thr": np.array(init.log_thresholds)}
        lr_groups = {"enc": "f", "dec": "f", "thr": "t"}

        def value_and_grad(bi, bt):
            return scnn_value_and_grad(params["enc"], params["dec"], params["thr"],
                                       init.residual, bi, bt)

        def rebuild():
            return ScnnRefiner(params["enc"].copy(), params["dec"].copy(),
                               params["thr"].copy(), init.residual)
    elif isinstance(init, DcnnRefiner):
        params = {"first": np.array(init.first_filters), "mid": np.array(init.mid_filters),
                  "last": np.array(init.last_filters)}
        lr_groups = {"first": "f", "mid": "f", "last": "f"}

        def value_and_grad(bi, bt):
            return dcnn_value_and_grad(params["first"], params["mid"], params["last"], bi, bt)

        def rebuild():
            return DcnnRefiner(params["first"].copy(), params["mid"].copy(),
                               params["last"].copy())
    else:
        raise TypeError(f"cannot train refiner of type {type(init).__name__}")

    opt = Adam(params)
    history: list[float] = []
    for epoch in range(config.epochs):
        lrs = {key: config.lr_at(config.lr_filters if grp == "f" else config.lr_thresholds,
                                 epoch)
               for key, grp in lr_groups.items()}
        order = rng.permutation(n_samples)
        batch_losses = []
        for start in range(0, n_samples, config.batch_size):
            # batch membership is random; in-batch order is sorted so that the
            # loss reduction has one fixed summation order
            idx = np.sort(order[start:start + config.batch_size])
            loss, grads = value_and_grad(inputs[idx], targets[idx])
            if not math.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", history)
            opt.step(params, grads, lrs)
            batch_losses.append(loss)
        # epoch loss = mean of the pre-update batch losses (one extra pass saved)
        history.append(float(np.mean(batch_losses)))
    return rebuild(), history


@dataclass(frozen=True)
class RefinerArch:
    """Architecture request for greedy training."""

    kind: str  # "scnn" | "dcnn"
    n_filters: int
    filter_size: int
    n_layers: int = 2
    residual: bool = True

    def __post_init__(self):
        if self.kind not in ("scnn", "dcnn"):
            raise ValueError(f"unknown refiner architecture {self.kind!r}")

    def build(self, rng: np.random.Generator):
        if self.kind == "scnn":
            return ScnnRefiner.init_random(self.n_filters, self.filter_size, rng,
                                           residual=self.residual)
        return DcnnRefiner.init_random(self.n_filters, self.filter_size, self.n_layers, rng)


def backprojection_init(datafit: QuadraticDataFit, shape: tuple[int, int]) -> ImageVector:
    """Weighted back-projection A^T W y rescaled into [0, 1]."""
    bp = datafit.op.adjoint(datafit.weights * datafit.measurements)
    top = float(np.max(bp))
    if top > 0:
        bp = np.clip(bp / top, 0.0, 1.0)
    else:
        bp = np.zeros_like(bp)
    return ImageVector(bp, shape)


def greedy_train(samples: Sequence[TrainingSample], arch: RefinerArch,
                 net_config: MomentumNetConfig, train_config: TrainConfig,
                 feasible=None):
    """Iteration-wise training: fit refiner i on the current sample states,
    then advance every sample one solver iteration with it.

    Stage 0 starts from fan-in-scaled random filters; later stages warm-start
    from the previous stage's parameters.  Returns (refiners, histories).
    """
    from .linops import FeasibleSet
    if feasible is None:
        feasible = FeasibleSet.nonneg()
    if net_config.n_iter < 1:
        raise ValueError("greedy training needs n_iter >= 1")
    if len(samples) == 0:
        raise ValueError("need at least one training sample")
    rng = np.random.default_rng(train_config.seed)

    shape = samples[0].truth.shape
    xs = []
    for s in samples:
        start = s.x0 if s.x0 is not None else backprojection_init(s.datafit, shape)
        xs.append(start.data.copy())
    xs_prev = [x.copy() for x in xs]
    states = [MomentumState(delta=net_config.delta, sharp=net_config.sharp_majorizer)
              for _ in samples]

    refiners = []
    histories = []
    current = arch.build(rng)
    for stage in range(net_config.n_iter):
        pairs = [(s.truth.as_2d(), x.reshape(shape)) for s, x in zip(samples, xs)]
        stage_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))
        current, history = train_refiner(current, pairs, train_config, rng=stage_rng)
        refiners.append(current)
        histories.append(history)
        for j, s in enumerate(samples):
            x_new, _, states[j] = momentum_net_step(
                xs[j], xs_prev[j], states[j], current, s.datafit, s.gamma,
                feasible, s.majorizer, net_config, shape)
            xs_prev[j], xs[j] = xs[j], x_new
    return refiners, histories


# ---------------------------------------------------------------------------
# convolutional-loss vs patch-loss bound
# ---------------------------------------------------------------------------

def extract_patches(image: np.ndarray, side: int) -> np.ndarray:
    """All overlapping side x side patches (circular boundary, stride 1).

    Column n holds the taps x[n - o] over the centered offset grid, matching
    the circular-convolution convention, so E @ patches reproduces the stacked
    analysis coefficients.
    """
    image = as_f64(image)
    offsets = np.arange(side) - side // 2
    rows = []
    for dy in offsets:
        for dx in offsets:
            rows.append(np.roll(image, (dy, dx), axis=(0, 1)).ravel())
    return np.stack(rows)


@dataclass(frozen=True)
class PatchBoundReport:
    trials: int
    violations: int
    max_gap: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def _patch_bound_sides(conv_loss_pairs, enc, dec, thr):
    """Both sides of the patch bound for one parameter draw."""
    k, rh, rw = enc.shape
    r = rh * rw
    e_mat = enc.reshape(k, r)
    d_mat = np.stack([flip_filter(dec[j]).ravel() for j in range(k)], axis=1)  # (R, K)
    n_pairs = len(conv_loss_pairs)
    left = 0.0
    right = 0.0
    for residual_img, inp in conv_loss_pairs:
        shape = inp.shape
        code = np.fft.irfft2(filter_fft(enc, shape) * np.fft.rfft2(inp), s=shape, axes=(-2, -1))
        hidden = soft_threshold(code, thr[:, None, None])
        dhat = filter_fft(dec, shape)
        recon = np.fft.irfft2(np.sum(dhat * np.fft.rfft2(hidden, axes=(-2, -1)), axis=0), s=shape)
        left += float(np.sum((residual_img - recon / r) ** 2))

        patches = extract_patches(inp, rh)
        target_patches = extract_patches(residual_img, rh)
        codes = soft_threshold(e_mat @ patches, thr[:, None])
        right += float(np.sum((target_patches - d_mat @ codes) ** 2)) / r
    return 0.5 * left / n_pairs, 0.5 * right / n_pairs


def patch_loss_bound_check(refiner: ScnnRefiner, pairs, trials: int,
                           seed: int = 0, slack: float = 1e-10) -> PatchBoundReport:
    """Verify that the convolutional training loss (with the 1/R-scaled,
    non-residual decoder form) never exceeds the all-overlapping-patches loss.

    Each trial redraws filters and thresholds at the refiner's architecture
    size; when `pairs` is None, random (residual, input) images are drawn too.
    Violations are reported, not raised.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    k = refiner.n_filters
    rh = refiner.enc_filters.shape[1]
    if rh % 2 == 0:
        raise ValueError("patch bound check requires odd filter side")
    rng = np.random.default_rng(seed)
    bound = math.sqrt(6.0 / refiner.filter_size)
    violations = 0
    worst = -math.inf
    for _ in range(trials):
        enc = rng.uniform(-bound, bound, size=(k, rh, rh))
        dec = rng.uniform(-bound, bound, size=(k, rh, rh))
        thr = np.abs(rng.normal(0.0, 0.1, size=k))
        if pairs is None:
            data = [(rng.standard_normal((12, 12)), rng.standard_normal((12, 12)))
                    for _ in range(2)]
        else:
            data = [(as_f64(t), as_f64(u)) for t, u in pairs]
        left, right = _patch_bound_sides(data, enc, dec, thr)
        gap = left - right
        if gap > slack * max(1.0, right):
            violations += 1
        worst = max(worst, gap)
    return PatchBoundReport(trials, violations, worst)
