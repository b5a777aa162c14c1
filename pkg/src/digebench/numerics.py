"""Deterministic numerical kernel.

Stable softmax / log-sum-exp reductions, an L-BFGS minimizer with a strong
Wolfe line search, a functional Adam step, chi-square and Student-t tail
probabilities built on incomplete gamma / beta series, counter-based RNG
streams, and a finite-difference gradient checker.

Everything here computes in 64-bit floats and is pure: identical inputs give
bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class NonFiniteError(ValueError):
    """A computation hit NaN/inf where a finite value is required."""


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def stable_softmax(v) -> np.ndarray:
    """Softmax computed with a max shift so any finite input is overflow-safe."""
    arr = _as_vector(v, "softmax input")
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


def log_sum_exp(v) -> float:
    """log(sum(exp(v))) with a max shift; exact for a single element."""
    arr = _as_vector(v, "log_sum_exp input")
    m = arr.max()
    if arr.size == 1:
        return float(m)
    return float(m + np.log(np.exp(arr - m).sum()))


def row_log_sum_exp(matrix: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked row-wise log-sum-exp.

    Rows must have at least one True mask entry. Used by reductions that
    aggregate over per-row index sets (e.g. risk sets).
    """
    work = np.where(mask, matrix, -np.inf)
    m = work.max(axis=1)
    return m + np.log(np.exp(work - m[:, None]).sum(axis=1))


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

_MIX_GAMMA = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    """One splitmix64 output; used only to derive child stream ids."""
    z = (z + _MIX_GAMMA) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


@dataclass
class RngStream:
    """A named, replayable random stream.

    Backed by the counter-based Philox generator keyed on
    (master_seed, stream_id): equal pairs replay byte-identical sequences,
    distinct stream ids are statistically independent. Instances are not
    shareable mid-sequence; derive a substream per concurrent task.
    """

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        self.master_seed = int(self.master_seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(self.stream_id) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.master_seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, index: int) -> "RngStream":
        """Derive an independent child stream; deterministic in (self, index)."""
        child = _splitmix64(self.stream_id ^ _splitmix64(int(index) & 0xFFFFFFFFFFFFFFFF))
        return RngStream(self.master_seed, child)

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """First k entries of a seeded permutation, in draw order."""
        if k > n:
            raise ValueError(f"cannot draw {k} items from {n} without replacement")
        return self._gen.permutation(n)[:k]


def poisson_sample(lam: float, rng: RngStream) -> int:
    """One Poisson(lam) draw by CDF inversion.

    Inversion is exact and cheap for moderate rates; larger rates are split
    into chunks of at most 30 (a sum of independent Poissons is Poisson).
    """
    if not math.isfinite(lam) or lam < 0:
        raise ValueError(f"Poisson rate must be finite and >= 0, got {lam}")
    total = 0
    remaining = float(lam)
    while remaining > 30.0:
        total += _poisson_inversion(30.0, rng)
        remaining -= 30.0
    return total + _poisson_inversion(remaining, rng)


def _poisson_inversion(lam: float, rng: RngStream) -> int:
    if lam == 0.0:
        return 0
    u = float(rng.uniform())
    p = math.exp(-lam)
    cdf = p
    k = 0
    # ~lam + 10*sqrt(lam) terms suffice; hard cap guards degenerate u ~ 1.
    cap = int(lam + 10.0 * math.sqrt(lam) + 20.0)
    while u > cdf and k < cap:
        k += 1
        p *= lam / k
        cdf += p
    return k


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    converged: bool
    iterations: int
    line_search_failures: int


def lbfgs_minimize(
    objective: Objective,
    x0,
    max_iterations: int = 1000,
    gradient_tolerance: float = 1e-8,
    memory: int = 10,
) -> LbfgsResult:
    """Minimize a smooth function with limited-memory BFGS.

    Uses the two-loop recursion with `memory` stored pairs and a strong Wolfe
    line search (c1=1e-4, c2=0.9). Stops when the gradient infinity norm drops
    to `gradient_tolerance`; otherwise returns the best iterate seen with
    converged=False. A failed line search falls back to a short
    steepest-descent step (counted) and the search continues.
    """
    x = np.array(x0, dtype=np.float64).ravel().copy()
    f, g = _eval_checked(objective, x)
    best_x, best_f = x.copy(), f

    s_list: list = []
    y_list: list = []
    rho_list: list = []
    failures = 0
    iteration = 0

    while iteration < max_iterations:
        if np.max(np.abs(g)) <= gradient_tolerance:
            return LbfgsResult(x, f, True, iteration, failures)

        d = -_two_loop_direction(g, s_list, y_list, rho_list)
        if np.dot(d, g) >= 0.0:  # not a descent direction: reset memory
            s_list, y_list, rho_list = [], [], []
            d = -g

        alpha, f_new, g_new, ok = _strong_wolfe(objective, x, f, g, d)
        if not ok:
            failures += 1
            s_list, y_list, rho_list = [], [], []
            d = -g
            alpha, f_new, g_new, ok = _backtrack(objective, x, f, g, d)
            if not ok:  # cannot decrease along -g: stuck at numerical floor
                iteration += 1
                break

        x_new = x + alpha * d
        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            if len(s_list) == memory:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)

        x, f, g = x_new, f_new, g_new
        if f < best_f:
            best_f, best_x = f, x.copy()
        iteration += 1

    if np.max(np.abs(g)) <= gradient_tolerance:
        return LbfgsResult(x, f, True, iteration, failures)
    if f <= best_f:
        best_f, best_x = f, x
    return LbfgsResult(best_x, best_f, False, iteration, failures)


def _eval_checked(objective: Objective, x: np.ndarray) -> Tuple[float, np.ndarray]:
    f, g = objective(x)
    g = np.asarray(g, dtype=np.float64).ravel()
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteError(
            f"objective returned non-finite value/gradient at |x|_inf={np.max(np.abs(x)):.3e}"
        )
    return float(f), g


def _two_loop_direction(g, s_list, y_list, rho_list) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append(a)
    if s_list:
        gamma = np.dot(s_list[-1], y_list[-1]) / np.dot(y_list[-1], y_list[-1])
        q *= gamma
    for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += s * (a - b)
    return q


_WOLFE_C1 = 1e-4
_WOLFE_C2 = 0.9


def _strong_wolfe(objective, x, f0, g0, d, max_steps: int = 25):
    """Bracket + zoom line search (strong Wolfe conditions).

    Non-finite trial points are treated as +inf (rejected and bracketed
    away); only accepted iterates must be finite.
    """
    phi0 = f0
    dphi0 = float(np.dot(g0, d))
    if dphi0 >= 0.0:
        return 0.0, f0, g0, False

    def phi(a):
        try:
            fa, ga = _eval_checked(objective, x + a * d)
        except NonFiniteError:
            return math.inf, None, math.inf
        return fa, ga, float(np.dot(ga, d))

    a_prev, phi_prev, dphi_prev = 0.0, phi0, dphi0
    a = 1.0
    for i in range(max_steps):
        fa, ga, dphia = phi(a)
        if fa > phi0 + _WOLFE_C1 * a * dphi0 or (i > 0 and fa >= phi_prev):
            return _zoom(phi, phi0, dphi0, a_prev, a, phi_prev, dphi_prev, fa, dphia)
        if abs(dphia) <= -_WOLFE_C2 * dphi0:
            return a, fa, ga, True
        if dphia >= 0.0:
            return _zoom(phi, phi0, dphi0, a, a_prev, fa, dphia, phi_prev, dphi_prev)
        a_prev, phi_prev, dphi_prev = a, fa, dphia
        a *= 2.0
    return 0.0, f0, g0, False


def _zoom(phi, phi0, dphi0, a_lo, a_hi, f_lo, d_lo, f_hi, d_hi, max_steps: int = 30):
    for _ in range(max_steps):
        # Quadratic interpolation from the low end, safeguarded by bisection.
        denom = f_hi - f_lo - d_lo * (a_hi - a_lo)
        if denom != 0.0:
            a = a_lo + 0.5 * d_lo * (a_lo - a_hi) * (a_hi - a_lo) / denom
        else:
            a = 0.5 * (a_lo + a_hi)
        lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
        width = hi - lo
        if not (lo + 0.05 * width <= a <= hi - 0.05 * width):
            a = 0.5 * (a_lo + a_hi)
        fa, ga, dphia = phi(a)
        if fa > phi0 + _WOLFE_C1 * a * dphi0 or fa >= f_lo:
            a_hi, f_hi, d_hi = a, fa, dphia
        else:
            if abs(dphia) <= -_WOLFE_C2 * dphi0:
                return a, fa, ga, True
            if dphia * (a_hi - a_lo) >= 0.0:
                a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
            a_lo, f_lo, d_lo = a, fa, dphia
        if abs(a_hi - a_lo) < 1e-14 * max(1.0, abs(a_lo)):
            break
    fa, ga, dphia = phi(a_lo) if a_lo > 0 else (phi0, None, dphi0)
    if a_lo > 0 and fa < phi0:
        return a_lo, fa, ga, True
    return 0.0, phi0, None, False


def _backtrack(objective, x, f0, g0, d, max_steps: int = 40):
    """Armijo-only fallback used after a strong Wolfe failure."""
    dphi0 = float(np.dot(g0, d))
    a = 1.0
    for _ in range(max_steps):
        try:
            fa, ga = _eval_checked(objective, x + a * d)
        except NonFiniteError:
            a *= 0.5
            continue
        if fa <= f0 + _WOLFE_C1 * a * dphi0:
            return a, fa, ga, True
        a *= 0.5
    return 0.0, f0, g0, False


@dataclass
class AdamState:
    """First/second moment buffers and the step counter for one tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64),
                   np.zeros_like(params, dtype=np.float64), 0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns (new params, new state)."""
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("non-finite gradient passed to adam_step")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


# ---------------------------------------------------------------------------
# Tail probabilities (incomplete gamma / beta)
# ---------------------------------------------------------------------------

_GAMMA_EPS = 1e-15
_GAMMA_ITMAX = 500


def _lower_gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by power series (x < a+1)."""
    if x == 0.0:
        return 0.0
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_GAMMA_ITMAX):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

def _upper_gamma_cf(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by Lentz continued fraction."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_ITMAX + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def chi_square_sf(x: float, df: int) -> float:
    """Chi-square survival function P(X > x), absolute error below 1e-8."""
    if df < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    if not math.isfinite(x) or x < 0:
        raise ValueError(f"chi-square statistic must be finite and >= 0, got {x}")
    a = 0.5 * df
    half = 0.5 * x
    if half == 0.0:
        return 1.0
    if half < a + 1.0:
        return 1.0 - _lower_gamma_series(a, half)
    return _upper_gamma_cf(a, half)


def _betacf(a: float, b: float, x: float) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _GAMMA_ITMAX + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) via the standard continued fraction with symmetry switch."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    """Two-sided tail P(|T_df| >= |t|)."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if not math.isfinite(t):
        raise NonFiniteError("non-finite t statistic")
    return regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def gradient_check(objective: Objective, x, epsilon: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per coordinate: |analytic - numeric| / max(1, |analytic|).
    """
    x = np.array(x, dtype=np.float64).ravel()
    _, analytic = _eval_checked(objective, x)
    worst = 0.0
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = epsilon
        f_plus, _ = _eval_checked(objective, x + step)
        f_minus, _ = _eval_checked(objective, x - step)
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
