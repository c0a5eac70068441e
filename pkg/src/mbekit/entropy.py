"""Matrix-based entropy of representation matrices and entropy bounds.

The central quantity is the Renyi-style entropy of the normalized Gram
spectrum of a tokens x features matrix R:

    S_alpha = 1/(1-alpha) * log( sum_i (lambda_i / trace)^alpha )

computed in nats. alpha=1 takes the Shannon limit over the same spectrum,
alpha=2 has a trace identity that avoids eigendecomposition entirely and is
what the training loop uses.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateRepresentationError, NonFiniteValueError
from .tensor import Tensor

LN2 = math.log(2.0)


@dataclass(frozen=True)
class MbeConfig:
    """Knobs for matrix-based entropy.

    alpha: Renyi order (> 0; 1 routes to the limit form).
    normalize: divide by log(min(s, d)), the max attainable value.
    epsilon: relative spectrum floor (times the trace) guarding log(0).
    """

    alpha: float = 2.0
    normalize: bool = True
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class SpectrumReport:
    """Eigenvalue view of one representation matrix."""

    eigenvalues: np.ndarray
    trace: float
    normalized_spectrum: np.ndarray
    mbe_value: float
    mbe_value_bits: float
    mbe_normalized: float
    alpha: float


def _as_tensor(r):
    return r if isinstance(r, Tensor) else Tensor(r)


def _small_side_gram(r):
    """Gram matrix on the smaller side; both sides share the nonzero spectrum."""
    s, d = r.shape
    if s <= d:
        return T.gram(r)
    return T.gram(T.transpose(r))


def _validate_rep(r):
    if r.ndim != 2 or r.shape[0] < 1 or r.shape[1] < 1:
        raise ValueError(f"expected a 2-D representation matrix, got shape {r.shape}")
    if not np.all(np.isfinite(r.data)):
        raise NonFiniteValueError("representation matrix contains NaN/Inf")


def _entropy_from_probs(p, alpha):
    """S_alpha in nats from a probability tensor, on the tape if p is."""
    if alpha == 1.0:
        return T.scalar_mul(T.sum_all(T.mul(p, T.log(p))), -1.0)
    return T.scalar_mul(
        T.log(T.sum_all(T.pow_const(p, alpha))), 1.0 / (1.0 - alpha)
    )


def mbe(r, config=MbeConfig()):
    """Matrix-based entropy of R (s x d), differentiable through the tape.

    Returns a scalar Tensor in nats (or divided by log(min(s, d)) when
    config.normalize). The spectrum is floored at epsilon * trace before
    normalization, so rank-deficient batches stay finite.
    """
    r = _as_tensor(r)
    _validate_rep(r)
    s, d = r.shape

    k = _small_side_gram(r)
    trace_value = float(np.trace(k.data))
    if trace_value <= config.epsilon:
        raise DegenerateRepresentationError(
            f"degenerate representation: Gram trace {trace_value:.3e}"
        )

    w = T.symmetric_eigenvalues(k)
    w = T.clip_min(w, config.epsilon * trace_value)
    total = T.reshape(T.sum_all(w), (1,))
    p = T.div(w, total)
    s_nats = _entropy_from_probs(p, config.alpha)

    rank_cap = min(s, d)
    if config.normalize and rank_cap > 1:
        s_nats = T.scalar_mul(s_nats, 1.0 / math.log(rank_cap))
    return s_nats


def mbe_alpha2(r, normalize=True, epsilon=1e-12):
    """MBE at alpha=2 via sum(lambda^2) = ||K||_F^2; no eigendecomposition.

    Equals mbe(r, alpha=2) to ~1e-10 and has a cheap exact backward, which
    is why the training loop runs on it.
    """
    r = _as_tensor(r)
    _validate_rep(r)
    s, d = r.shape

    k = _small_side_gram(r)
    trace_value = float(np.trace(k.data))
    if trace_value <= epsilon:
        raise DegenerateRepresentationError(
            f"degenerate representation: Gram trace {trace_value:.3e}"
        )

    # S_2 = -log(||K||_F^2 / trace^2) = 2 log trace - log ||K||_F^2
    s_nats = T.sub(
        T.scalar_mul(T.log(T.trace(k)), 2.0), T.log(T.frobenius_norm_sq(k))
    )
    rank_cap = min(s, d)
    if normalize and rank_cap > 1:
        s_nats = T.scalar_mul(s_nats, 1.0 / math.log(rank_cap))
    return s_nats


def spectrum_report(r, config=MbeConfig()):
    """Non-differentiable spectrum summary used for run logs."""
    r = _as_tensor(r)
    _validate_rep(r)
    s, d = r.shape
    k = _small_side_gram(Tensor(r.data))
    trace_value = float(np.trace(k.data))
    if trace_value <= config.epsilon:
        raise DegenerateRepresentationError(
            f"degenerate representation: Gram trace {trace_value:.3e}"
        )
    w = np.maximum(T.symmetric_eigenvalues(k).data, 0.0)
    floored = np.maximum(w, config.epsilon * trace_value)
    probs = floored / floored.sum()

    alpha = config.alpha
    if alpha == 1.0:
        s_nats = float(-(probs * np.log(probs)).sum())
    else:
        s_nats = float(np.log((probs**alpha).sum()) / (1.0 - alpha))
    rank_cap = min(s, d)
    normalized = s_nats / math.log(rank_cap) if rank_cap > 1 else 0.0
    return SpectrumReport(
        eigenvalues=w,
        trace=trace_value,
        normalized_spectrum=probs,
        mbe_value=s_nats,
        mbe_value_bits=s_nats / LN2,
        mbe_normalized=normalized,
        alpha=alpha,
    )


def shannon_entropy(p):
    """Shannon entropy in bits of a probability vector; 0*log(0) := 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-8:
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def beta_for_distribution(p):
    """Entropy fraction beta with H(p) = beta * log2(n), clamped to (0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("all probabilities must be strictly positive")
    n = p.size
    if n < 2:
        raise ValueError("need a support of at least 2 outcomes")
    beta = shannon_entropy(p) / math.log2(n)
    return float(min(max(beta, np.nextafter(0.0, 1.0)), 1.0))


@dataclass(frozen=True)
class MinProbBound:
    exact_bound: float
    approx_bound: float


def min_prob_entropy_bound(n, alpha_min):
    """Entropy lower bounds for an n-outcome variable with P(x) >= alpha_min.

    exact_bound is the entropy of the most imbalanced admissible
    distribution (one heavy outcome, the rest at alpha_min); approx_bound
    is the small-alpha linearization (alpha_min * n) * log2(n).
    """
    n = int(n)
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if not (0.0 < alpha_min <= 1.0 / n):
        raise ValueError(f"alpha_min must lie in (0, 1/{n}], got {alpha_min}")
    heavy = 1.0 - alpha_min * (n - 1)
    exact = -heavy * math.log2(heavy) - (n - 1) * alpha_min * math.log2(alpha_min)
    approx = (alpha_min * n) * math.log2(n)
    return MinProbBound(exact_bound=float(exact), approx_bound=float(approx))


@dataclass(frozen=True)
class BoundInputs:
    """Inputs shared by the bound calculators.

    n_samples and h_per_layer (bits) feed the generalization-gap bound;
    beta / omega_size / min_prob belong to the entropy lower bounds and are
    optional here.
    """

    n_samples: int
    h_per_layer: tuple = ()
    alpha_exponent: float = 1.0
    beta: float = None
    omega_size: int = None
    min_prob: float = None

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError(f"n_samples must be >= 2, got {self.n_samples}")
        if self.alpha_exponent < 1.0:
            raise ValueError(f"alpha_exponent must be >= 1, got {self.alpha_exponent}")
        if self.beta is not None and not (0.0 < self.beta <= 1.0):
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.min_prob is not None and self.omega_size is not None:
            if not (0.0 < self.min_prob <= 1.0 / self.omega_size):
                raise ValueError(
                    f"min_prob must lie in (0, 1/{self.omega_size}], got {self.min_prob}"
                )


def generalization_gap_bound(inputs):
    """log2(N) * 2^(alpha * min_l H_l) / sqrt(N), the absorbed constant set to 1.

    An order-of-magnitude diagnostic: only ratios and monotonicity are
    meaningful. Increasing any layer entropy at the argmin raises it;
    increasing N (>= 16) lowers it.
    """
    if len(inputs.h_per_layer) == 0:
        raise ValueError("h_per_layer must be nonempty")
    n = inputs.n_samples
    h_min = min(inputs.h_per_layer)
    return float(
        math.log2(n) * 2.0 ** (inputs.alpha_exponent * h_min) / math.sqrt(n)
    )
