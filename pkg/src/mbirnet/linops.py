"""Linear operators, quadratic data-fit terms, and diagonal majorizers.

Everything downstream (proximal steps, solvers, training) consumes the types
defined here.  All numerics are double precision; the types are value objects
that do not mutate after construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Raised when vector/operator dimensions do not line up."""


def as_f64(a) -> np.ndarray:
    """Coerce to a contiguous float64 array."""
    return np.ascontiguousarray(a, dtype=np.float64)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = as_f64(a)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# image container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageVector:
    """Flat real-valued signal plus its 2-D shape (height, width)."""

    data: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        data = _frozen(np.ravel(self.data))
        object.__setattr__(self, "data", data)
        h, w = self.shape
        if data.size != h * w:
            raise ShapeError(f"data length {data.size} != {h}x{w}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image entries must be finite")

    @classmethod
    def from_2d(cls, arr) -> "ImageVector":
        arr = as_f64(arr)
        return cls(arr.ravel(), arr.shape)

    def as_2d(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size


def _match_return(x, out: np.ndarray):
    """Return `out` as ImageVector when the input was one."""
    if isinstance(x, ImageVector):
        return ImageVector(out, x.shape)
    return out


def _flat(x) -> np.ndarray:
    if isinstance(x, ImageVector):
        return x.data
    return as_f64(np.ravel(x))


# ---------------------------------------------------------------------------
# linear operators
# ---------------------------------------------------------------------------

class LinearOperator:
    """Abstract forward/adjoint pair u -> Au, v -> A^T v.

    Subclasses provide `forward`, `adjoint` and `majorizer_diag`, the latter
    returning diag(|A^T| W |A| 1) for a nonnegative weight vector, which is a
    diagonal curvature bound for the weighted normal matrix A^T W A.
    """

    shape: tuple[int, int]  # (m, n) = (output dim, input dim)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def majorizer_diag(self, weights: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    @property
    def in_dim(self) -> int:
        return self.shape[1]

    @property
    def out_dim(self) -> int:
        return self.shape[0]

    def _check_in(self, x: np.ndarray):
        if x.size != self.in_dim:
            raise ShapeError(f"operator expects input of length {self.in_dim}, got {x.size}")

    def _check_out(self, y: np.ndarray):
        if y.size != self.out_dim:
            raise ShapeError(f"operator expects adjoint input of length {self.out_dim}, got {y.size}")


class DenseMatrixOperator(LinearOperator):
    """Operator backed by an explicit dense matrix."""

    def __init__(self, matrix):
        self.matrix = _frozen(np.atleast_2d(matrix))
        self.shape = self.matrix.shape

    def forward(self, x):
        x = _flat(x)
        self._check_in(x)
        return self.matrix @ x

    def adjoint(self, y):
        y = _flat(y)
        self._check_out(y)
        return self.matrix.T @ y

    def majorizer_diag(self, weights):
        a = np.abs(self.matrix)
        return a.T @ (as_f64(weights) * (a @ np.ones(self.in_dim)))


class SparseMatrixOperator(LinearOperator):
    """Operator backed by a scipy CSR matrix (e.g. a sparse-view Radon matrix)."""

    def __init__(self, matrix):
        self.matrix = sp.csr_matrix(matrix).astype(np.float64)
        self.shape = self.matrix.shape
        self._adj = self.matrix.T.tocsr()

    def forward(self, x):
        x = _flat(x)
        self._check_in(x)
        return self.matrix @ x

    def adjoint(self, y):
        y = _flat(y)
        self._check_out(y)
        return self._adj @ y

    def majorizer_diag(self, weights):
        a = sp.csr_matrix(abs(self.matrix))
        return np.asarray(a.T @ (as_f64(weights) * (a @ np.ones(self.in_dim))))


class IdentityOperator(LinearOperator):
    def __init__(self, n: int):
        self.shape = (n, n)

    def forward(self, x):
        x = _flat(x)
        self._check_in(x)
        return x.copy()

    adjoint = forward

    def majorizer_diag(self, weights):
        return as_f64(weights).copy()


class CircularConvOperator(LinearOperator):
    """2-D circular convolution with a small kernel; adjoint is correlation.

    The kernel taps sit on centered offsets (range(r) - r//2 per axis) and the
    boundary condition is circulant, so the operator is an N x N circulant
    matrix whose entries are the kernel taps.
    """

    def __init__(self, kernel, image_shape: tuple[int, int]):
        self.kernel = _frozen(np.atleast_2d(kernel))
        if not np.all(np.isfinite(self.kernel)):
            raise ValueError("kernel must be finite")
        self.image_shape = (int(image_shape[0]), int(image_shape[1]))
        n = self.image_shape[0] * self.image_shape[1]
        self.shape = (n, n)
        self._khat = np.fft.rfft2(embed_kernel(self.kernel, self.image_shape))
        self._abs_khat = np.fft.rfft2(embed_kernel(np.abs(self.kernel), self.image_shape))

    def _conv(self, x, khat):
        u = _flat(x).reshape(self.image_shape)
        out = np.fft.irfft2(khat * np.fft.rfft2(u), s=self.image_shape)
        return out.ravel()

    def forward(self, x):
        self._check_in(_flat(x))
        return self._conv(x, self._khat)

    def adjoint(self, y):
        self._check_out(_flat(y))
        return self._conv(y, np.conj(self._khat))

    def majorizer_diag(self, weights):
        w = as_f64(weights)
        s = float(np.sum(np.abs(self.kernel)))
        return self._conv(w * s, np.conj(self._abs_khat))

    def to_sparse(self) -> sp.csr_matrix:
        """Materialize the circulant matrix (one band per kernel tap)."""
        h, w = self.image_shape
        n = h * w
        kh, kw = self.kernel.shape
        rows_grid, cols_grid = np.divmod(np.arange(n), w)
        data, rows, cols = [], [], []
        for a in range(kh):
            dy = a - kh // 2
            for b in range(kw):
                dx = b - kw // 2
                val = self.kernel[a, b]
                if val == 0.0:
                    continue
                src = ((rows_grid - dy) % h) * w + (cols_grid - dx) % w
                rows.append(np.arange(n))
                cols.append(src)
                data.append(np.full(n, val))
        if not data:
            return sp.csr_matrix((n, n))
        return sp.csr_matrix(sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n)))


def embed_kernel(kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Place kernel taps at their centered offsets modulo the image shape."""
    kernel = np.atleast_2d(kernel)
    kh, kw = kernel.shape
    h, w = shape
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kernel.shape} larger than image {shape}")
    out = np.zeros(shape)
    rows = (np.arange(kh) - kh // 2) % h
    cols = (np.arange(kw) - kw // 2) % w
    out[np.ix_(rows, cols)] = kernel
    return out


# ---------------------------------------------------------------------------
# data fit, majorizer, feasible set, objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticDataFit:
    """Weighted least-squares data fit  f(x) = 1/2 ||y - Ax||^2_W."""

    op: LinearOperator
    weights: np.ndarray
    measurements: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(np.ravel(self.weights)))
        object.__setattr__(self, "measurements", _frozen(np.ravel(self.measurements)))
        if np.any(self.weights < 0):
            raise ValueError("weights must be entrywise nonnegative")
        if self.weights.size != self.op.out_dim:
            raise ShapeError("weights length must equal operator output dim")
        if self.measurements.size != self.op.out_dim:
            raise ShapeError("measurement length must equal operator output dim")

    def value(self, x) -> float:
        r = self.op.forward(_flat(x)) - self.measurements
        return 0.5 * float(np.dot(self.weights * r, r))

    @property
    def n(self) -> int:
        return self.op.in_dim


@dataclass(frozen=True)
class DiagonalMajorizer:
    """Positive diagonal metric M with scale factor lam >= 1 (scaled form lam*M)."""

    diag: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "diag", _frozen(np.ravel(self.diag)))
        object.__setattr__(self, "lam", float(self.lam))
        if self.diag.size == 0:
            raise ValueError("empty diagonal")
        if not np.all(np.isfinite(self.diag)) or np.any(self.diag <= 0):
            raise ValueError("majorizer diagonal must be finite and strictly positive")
        if self.lam < 1.0:
            raise ValueError("scale lam must be >= 1")

    @property
    def scaled_diag(self) -> np.ndarray:
        return self.lam * self.diag

    def with_lam(self, lam: float) -> "DiagonalMajorizer":
        return DiagonalMajorizer(self.diag, lam)

    def shifted(self, gamma: float, lam: Optional[float] = None) -> "DiagonalMajorizer":
        """Majorizer for the gradient of f + (gamma/2)||x - z||^2."""
        return DiagonalMajorizer(self.diag + gamma, self.lam if lam is None else lam)


@dataclass(frozen=True)
class FeasibleSet:
    """Convex closed constraint set: all of R^N, the nonnegative orthant, or a box."""

    kind: str
    lo: float = -np.inf
    hi: float = np.inf

    _KINDS = ("all", "nonneg", "box")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown feasible set kind {self.kind!r}")
        if self.kind == "box" and not self.lo <= self.hi:
            raise ValueError("box requires lo <= hi")

    @classmethod
    def all(cls) -> "FeasibleSet":
        return cls("all")

    @classmethod
    def nonneg(cls) -> "FeasibleSet":
        return cls("nonneg", lo=0.0)

    @classmethod
    def box(cls, lo: float, hi: float) -> "FeasibleSet":
        return cls("box", lo=float(lo), hi=float(hi))

    def project(self, v: np.ndarray) -> np.ndarray:
        if self.kind == "all":
            return np.array(v, dtype=np.float64, copy=True)
        if self.kind == "nonneg":
            return np.maximum(v, 0.0)
        return np.clip(v, self.lo, self.hi)

    def contains(self, v: np.ndarray, tol: float = 0.0) -> bool:
        if self.kind == "all":
            return True
        if self.kind == "nonneg":
            return bool(np.all(v >= -tol))
        return bool(np.all(v >= self.lo - tol) and np.all(v <= self.hi + tol))


@dataclass(frozen=True)
class MbirObjective:
    """F(x; y, z) = f(x; y) + (gamma/2) ||x - z||^2 over a feasible set."""

    datafit: QuadraticDataFit
    gamma: float
    anchor: np.ndarray
    feasible: FeasibleSet

    def __post_init__(self):
        object.__setattr__(self, "anchor", _frozen(np.ravel(_flat(self.anchor))))
        object.__setattr__(self, "gamma", float(self.gamma))
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.anchor.size != self.datafit.n:
            raise ShapeError("anchor length must equal operator input dim")

    def value(self, x) -> float:
        x = _flat(x)
        d = x - self.anchor
        return self.datafit.value(x) + 0.5 * self.gamma * float(np.dot(d, d))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def apply_forward(op: LinearOperator, x) -> np.ndarray:
    """Forward map Ax (dimension-checked)."""
    return op.forward(_flat(x))


def datafit_gradient(f: QuadraticDataFit, x):
    """Gradient A^T W (Ax - y) of the weighted least-squares data fit."""
    xf = _flat(x)
    if xf.size != f.n:
        raise ShapeError(f"gradient point has length {xf.size}, expected {f.n}")
    r = f.op.forward(xf) - f.measurements
    return _match_return(x, f.op.adjoint(f.weights * r))


def diag_majorizer(f: QuadraticDataFit, lam: float = 1.0) -> DiagonalMajorizer:
    """Diagonal curvature bound diag(|A^T| W |A| 1) >= A^T W A.

    Zero diagonal entries (all-zero rows/columns of A) are floored at
    1e-8 * max-entry so the majorizer stays strictly positive definite; an
    identically-zero operator falls back to an absolute 1e-8 floor.
    """
    d = f.op.majorizer_diag(f.weights)
    dmax = float(np.max(d)) if d.size else 0.0
    floor = 1e-8 * dmax if dmax > 0 else 1e-8
    return DiagonalMajorizer(np.maximum(d, floor), lam)


def mbir_gradient(obj: MbirObjective, x):
    """Gradient of F(x; y, z): data-fit gradient plus gamma * (x - z)."""
    xf = _flat(x)
    g = datafit_gradient(obj.datafit, xf) + obj.gamma * (xf - obj.anchor)
    return _match_return(x, g)


@dataclass(frozen=True)
class MajorizationReport:
    trials: int
    violations: int
    max_violation: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def verify_majorization(
    f: QuadraticDataFit,
    m: DiagonalMajorizer,
    trials: int,
    seed: int,
    rel_tol: float = 1e-10,
) -> MajorizationReport:
    """Check the quadratic upper bound f(u) <= f(v) + <grad f(v), u-v> + 1/2||u-v||_M^2.

    Sampling is over random Gaussian pairs; violations beyond `rel_tol`
    (relative to the magnitude of both sides) are counted, never raised.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    n = f.n
    md = m.scaled_diag
    violations = 0
    worst = 0.0
    for _ in range(trials):
        u = rng.standard_normal(n)
        v = rng.standard_normal(n)
        d = u - v
        lhs = f.value(u)
        rhs = f.value(v) + float(np.dot(datafit_gradient(f, v), d)) + 0.5 * float(np.dot(md * d, d))
        scale = max(1.0, abs(lhs), abs(rhs))
        gap = (lhs - rhs) / scale
        if gap > rel_tol:
            violations += 1
        worst = max(worst, gap)
    return MajorizationReport(trials, violations, worst)


def power_iteration(op: LinearOperator, n_iter: int = 100, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest singular value of `op` via power iteration on A^T A."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.in_dim)
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(n_iter):
        ax = op.forward(x)
        sigma_new = float(np.linalg.norm(ax))
        x = op.adjoint(ax)
        nx = np.linalg.norm(x)
        if nx == 0:
            return 0.0
        x /= nx
        if sigma > 0 and abs(sigma_new - sigma) <= tol * sigma:
            return sigma_new
        sigma = sigma_new
    return sigma


def spectral_spread(m: Union[DiagonalMajorizer, LinearOperator]) -> float:
    """Spread sigma_max - sigma_min of a positive (semi)definite metric.

    Exact max-min difference for diagonal majorizers.  For a general operator
    the largest singular value comes from power iteration and sigma_min is
    taken as 0, which is exact for the rank-deficient imaging operators used
    here and an upper bound otherwise.
    """
    if isinstance(m, DiagonalMajorizer):
        return float(np.max(m.diag) - np.min(m.diag))
    if isinstance(m, LinearOperator):
        return power_iteration(m)
    raise TypeError(f"unsupported argument of type {type(m).__name__}")
