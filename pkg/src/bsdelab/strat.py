"""Multi-index algebra and iterated Stratonovich/Lebesgue integral calculus.

Words over the alphabet {0, 1, ..., d} index iterated integrals: letter 0
integrates against time, letter j >= 1 against the j-th path coordinate. On
piecewise-linear paths every iterated integral is a piecewise polynomial and
is evaluated exactly, segment by segment. This module is the test bed that
certifies cubature formulas and the scheme's weight functionals; nothing here
sits on the solver hot path.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import product

import numpy as np

from .errors import InvalidArgumentError

# combinatorial enumeration is only exercised at small sizes; beyond this the
# growth is unused by any consumer
MAX_WEIGHT = 8
MAX_DIM = 2

_EPS_CBRT = float(np.finfo(float).eps) ** (1.0 / 3.0)


# ---------------------------------------------------------------------------
# multi-index algebra


def norms(word) -> tuple[int, int]:
    """Return (length |a|, weight ||a|| = |a| + number of zero letters)."""
    word = tuple(word)
    return len(word), len(word) + sum(1 for a in word if a == 0)


def left_remove(word):
    """Drop the first letter: -a."""
    return tuple(word)[1:]


def right_remove(word):
    """Drop the last letter: a-."""
    return tuple(word)[:-1]


def letter_insertions(word, j):
    """All words obtained by inserting letter j into one of the |a|+1 slots."""
    word = tuple(word)
    return [word[:k] + (j,) + word[k:] for k in range(len(word) + 1)]


def is_hierarchical(members) -> bool:
    """True iff the set contains -a for every nonempty member."""
    s = {tuple(w) for w in members}
    return all(w[1:] in s for w in s if w)


def hierarchical_set(m: int, d: int) -> frozenset:
    """Enumerate A_m = all words over {0..d} with weight <= m (incl. the empty word)."""
    if m < 0 or d < 1:
        raise InvalidArgumentError(f"need m >= 0 and d >= 1, got m={m}, d={d}")
    if m > MAX_WEIGHT or d > MAX_DIM:
        raise InvalidArgumentError(
            f"enumeration capped at weight {MAX_WEIGHT} and dimension {MAX_DIM}"
        )
    out = [()]
    for length in range(1, m + 1):  # weight >= length, so longer words can't fit
        for w in product(range(d + 1), repeat=length):
            if norms(w)[1] <= m:
                out.append(w)
    return frozenset(out)


def remainder_set(members, d: int) -> frozenset:
    """B(G) = {b not in G : -b in G}, computed from the definition."""
    s = {tuple(w) for w in members}
    if not s:
        raise InvalidArgumentError("remainder set needs a nonempty hierarchical set")
    if not is_hierarchical(s):
        raise InvalidArgumentError("remainder set is only defined for hierarchical sets")
    out = set()
    for g in s:
        for j in range(d + 1):
            cand = (j,) + g
            if cand not in s:
                out.add(cand)
    return frozenset(out)


# ---------------------------------------------------------------------------
# exact expectations (Lemma 1 of the moment characterization)


def _block_decomposable(word) -> bool:
    # greedy parse into blocks (0) or (j,j); the parse is forced at each step
    i, w = 0, tuple(word)
    while i < len(w):
        if w[i] == 0:
            i += 1
        elif i + 1 < len(w) and w[i + 1] == w[i]:
            i += 2
        else:
            return False
    return True


def expected_iterated_integral(word, t: float) -> float:
    """E[J_a[1]_{0,t}] for Brownian coordinates: zero unless ||a|| is even and
    a splits into blocks (0) or (j,j), in which case t^(m/2) / (2^(r-m/2) (m/2)!)
    with m = ||a||, r = |a|.

    The combinatorial factor is kept in exact rational arithmetic; only the
    power of t is floating.
    """
    if t < 0.0:
        raise InvalidArgumentError(f"need t >= 0, got {t}")
    word = tuple(word)
    if not word:
        return 1.0
    r, m = norms(word)
    if m % 2 == 1 or not _block_decomposable(word):
        return 0.0
    half = m // 2
    factor = Fraction(1, 2 ** (r - half) * math.factorial(half))
    return float(factor) * t**half


# ---------------------------------------------------------------------------
# piecewise-linear paths and exact pathwise evaluation


@dataclass(frozen=True)
class PiecewiseLinearPath:
    """Continuous piecewise-linear path started at zero.

    `times` has shape (K+1,) and `values` (K+1,) or (K+1, d); the time
    coordinate omega^0(s) = s is implicit.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if np.any(np.diff(t) <= 0.0):
            raise InvalidArgumentError("path times must be strictly increasing")
        if v.shape[0] != t.shape[0]:
            raise InvalidArgumentError("times and values length mismatch")
        if np.any(v[0] != 0.0):
            raise InvalidArgumentError("paths must start at zero")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values, axis=0) / self.deltas[:, None]

    @property
    def endpoint(self) -> np.ndarray:
        return self.values[-1]

    def restricted(self, s: float, t: float) -> "PiecewiseLinearPath":
        """Sub-path over [s, t], re-based so it starts at zero."""
        if s < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12 or s >= t:
            raise InvalidArgumentError(f"[{s}, {t}] outside path support")
        interior = self.times[(self.times > s) & (self.times < t)]
        ts = np.concatenate(([s], interior, [t]))
        vs = np.empty((len(ts), self.d))
        for j in range(self.d):
            vs[:, j] = np.interp(ts, self.times, self.values[:, j])
        return PiecewiseLinearPath(ts, vs - vs[0])


def _iterated_on_slopes(word, dts, slopes):
    """Exact iterated integral given per-segment slopes (..., K, d).

    Each integration level keeps, per segment, polynomial coefficients in the
    local variable (ascending powers starting at u^0); the running constant is
    carried across segments by an exclusive prefix sum.
    """
    word = tuple(word)
    batch = slopes.shape[:-2]
    if not word:
        return np.ones(batch) if batch else 1.0
    k = slopes.shape[-2]
    coeffs = np.ones(batch + (k, 1))
    total = None
    for letter in word:
        deg = coeffs.shape[-1]
        if letter == 0:
            intc = coeffs / np.arange(1, deg + 1)
        else:
            intc = coeffs * slopes[..., letter - 1][..., None] / np.arange(1, deg + 1)
        # increment over each segment: sum_p intc_p * dt^(p+1), by Horner
        end = intc[..., -1]
        for p in range(deg - 2, -1, -1):
            end = end * dts + intc[..., p]
        end = end * dts
        carry = np.cumsum(end, axis=-1)
        total = carry[..., -1]
        carry = np.concatenate([np.zeros(batch + (1,)), carry[..., :-1]], axis=-1)
        coeffs = np.concatenate([carry[..., None], intc], axis=-1)
    return total


def pathwise_integral(word, path: PiecewiseLinearPath, interval=None) -> float:
    """J_a[1] over the path (or a sub-interval), exact up to rounding.

    Letter 0 integrates du, letter j >= 1 integrates against coordinate j as a
    Riemann-Stieltjes integral (= the Stratonovich integral on smooth paths).
    """
    word = tuple(word)
    if any(a < 0 or a > path.d for a in word):
        raise InvalidArgumentError(f"word {word} has letters beyond path dimension {path.d}")
    if interval is not None:
        path = path.restricted(*interval)
    return float(_iterated_on_slopes(word, path.deltas, path.slopes))


def pathwise_integral_batch(word, times, values) -> np.ndarray:
    """Vectorized `pathwise_integral` over a bundle of paths.

    `times` is the shared grid (K+1,), `values` has shape (P, K+1, d) with
    every path starting at zero. Returns shape (P,).
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[:, :, None]
    d = values.shape[2]
    if any(a < 0 or a > d for a in word):
        raise InvalidArgumentError(f"word {tuple(word)} has letters beyond dimension {d}")
    dts = np.diff(times)
    slopes = np.diff(values, axis=1) / dts[None, :, None]
    out = _iterated_on_slopes(tuple(word), dts, slopes)
    return np.asarray(out) if tuple(word) else np.ones(values.shape[0])


def brownian_pl_paths(count, segments, horizon, d=1, seed=0):
    """Piecewise-linear interpolations of Brownian paths on a uniform grid.

    Returns (times (K+1,), values (count, K+1, d)).
    """
    rng = np.random.default_rng(seed)
    dt = horizon / segments
    inc = rng.standard_normal((count, segments, d)) * math.sqrt(dt)
    values = np.concatenate([np.zeros((count, 1, d)), np.cumsum(inc, axis=1)], axis=1)
    return np.linspace(0.0, horizon, segments + 1), values


# ---------------------------------------------------------------------------
# joint law of (dW, J^(0,l)) on one step


@dataclass(frozen=True)
class IncrementLaw:
    """Per-dimension joint Gaussian law of (dW^l, J^(0,l)) over a step of size delta.

    J^(0,l) = int_0^delta s dW^l_s, with the inner time measured from the
    interval's left end. Cross-dimension blocks vanish.
    """

    delta: float
    d: int = 1

    def __post_init__(self):
        if self.delta <= 0.0:
            raise InvalidArgumentError(f"need delta > 0, got {self.delta}")

    def covariance(self) -> np.ndarray:
        """2x2 covariance of (dW^l, J^(0,l)): [[d, d^2/2], [d^2/2, d^3/3]]."""
        de = self.delta
        return np.array([[de, de**2 / 2.0], [de**2 / 2.0, de**3 / 3.0]])

    def weight_moments(self) -> tuple[float, float]:
        """(E[Z dW], E[Z J]) for Z = 4 dW/d - 6 J/d^2, straight from the covariance."""
        c = self.covariance()
        de = self.delta
        return (
            4.0 / de * c[0, 0] - 6.0 / de**2 * c[0, 1],
            4.0 / de * c[0, 1] - 6.0 / de**2 * c[1, 1],
        )

    def sample(self, seed, count):
        """Reproducible draws; returns (dW, J), each of shape (count, d).

        Built from standardized normals so the Brownian scaling
        (w, j) -> (sqrt(d) w, d^(3/2) j) holds exactly across deltas at a
        fixed seed.
        """
        rng = np.random.default_rng(seed)
        g1 = rng.standard_normal((count, self.d))
        g2 = rng.standard_normal((count, self.d))
        sd = math.sqrt(self.delta)
        dw = sd * g1
        j = self.delta**1.5 * (0.5 * g1 + g2 / math.sqrt(12.0))
        return dw, j


def sample_increments(delta, seed, count, d=1):
    """Convenience wrapper around IncrementLaw(delta, d).sample."""
    return IncrementLaw(delta, d).sample(seed, count)


# ---------------------------------------------------------------------------
# iterated differential operators L^a


def _fd_step(v):
    return _EPS_CBRT * (1.0 + abs(float(v)))


def apply_l_operator(word, g, vector_fields):
    """Iterated operator L^a g with L^0 = d_t + V_0 . grad, L^j = V_j . grad.

    `vector_fields` is the sequence (V_0, ..., V_d); each maps a state to a
    state-velocity (scalars for one-dimensional state). The first letter acts
    outermost: L^a g = L^{a_1}(... L^{a_n} g). Spatial and time derivatives
    use central differences with step eps^(1/3) * (1 + |coordinate|); accuracy
    degrades with nesting depth, which is fine for its test-only role.
    """
    word = tuple(word)
    d = len(vector_fields) - 1
    if any(a < 0 or a > d for a in word):
        raise InvalidArgumentError(f"word {word} has letters beyond dimension {d}")
    if not word:
        return g

    inner = apply_l_operator(word[1:], g, vector_fields)
    j = word[0]

    def field(t, x):
        scalar = np.isscalar(x) or np.ndim(x) == 0
        xv = np.atleast_1d(np.asarray(x, dtype=float))
        vj = np.atleast_1d(np.asarray(vector_fields[j](x), dtype=float))

        def eval_inner(tt, xx):
            return inner(tt, xx[0] if scalar else xx)

        out = 0.0
        for k in range(xv.size):
            h = _fd_step(xv[k])
            xp, xm = xv.copy(), xv.copy()
            xp[k] += h
            xm[k] -= h
            out += vj[k] * (eval_inner(t, xp) - eval_inner(t, xm)) / (2.0 * h)
        if j == 0:
            ht = _fd_step(t)
            out += (eval_inner(t + ht, xv) - eval_inner(t - ht, xv)) / (2.0 * ht)
        return out

    return field
