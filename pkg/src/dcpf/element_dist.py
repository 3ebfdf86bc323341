"""Element distributions for discrete compound Poisson models.

Each session count ``x >= 1`` follows one of four laws written in
exponential-dispersion form ``p(x) = exp(x*theta - kappa.psi(theta)) h(x, kappa)``:

* ``log``  -- logarithmic series, p = e^theta in (0, 1)
* ``ztp``  -- zero-truncated Poisson, lambda = e^theta > 0
* ``geo``  -- shifted geometric, P(x) = (1-p) p^(x-1)
* ``shnb`` -- shifted negative binomial, x - 1 ~ NB(a, p); kappa = (1, a)

The sum of ``n`` i.i.d. elements has base measure
``h(y, n kappa) = n!/y! * St(y, n)`` for the three Stirling kinds
(first: log, second: ztp, Lah: geo), and
``Gamma(y - n + n a) / (Gamma(y - n + 1) Gamma(n a))`` for shnb.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

KINDS = ("log", "ztp", "geo", "shnb")
STIRLING_KIND = {"log": "first", "ztp": "second", "geo": "lah"}

# interior clamp used by the estimators
THETA_MIN = -40.0
THETA_MAX_NEG = -1e-12
THETA_MAX_ZTP = 40.0

STIRLING_CAP = 5000


class ThetaDomainError(ValueError):
    pass


def _check_kind(kind):
    if kind not in KINDS:
        raise ValueError(f"unknown element distribution {kind!r}; expected one of {KINDS}")


def _in_domain(kind, theta) -> bool:
    if not np.isfinite(theta):
        return False
    return True if kind == "ztp" else theta < 0.0


@dataclass(frozen=True)
class ElementDistribution:
    """Law of a single session count. ``kappa2`` is the NB shape ``a`` (shnb only)."""

    kind: str
    theta: float
    kappa2: float = 1.0

    def __post_init__(self):
        _check_kind(self.kind)
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "kappa2", float(self.kappa2))
        if not _in_domain(self.kind, self.theta):
            raise ThetaDomainError(f"theta={self.theta} outside the domain of {self.kind}")
        if self.kind != "shnb" and self.kappa2 != 1.0:
            raise ValueError(f"{self.kind} has fixed dispersion 1")
        if not (self.kappa2 > 0 and np.isfinite(self.kappa2)):
            raise ValueError("kappa2 must be positive")

    @property
    def p(self) -> float:
        return math.exp(self.theta)

    @classmethod
    def from_p(cls, kind, p, kappa2=1.0):
        return cls(kind, math.log(p), kappa2)

    def with_params(self, theta=None, kappa2=None) -> "ElementDistribution":
        return ElementDistribution(
            self.kind,
            self.theta if theta is None else theta,
            self.kappa2 if kappa2 is None else kappa2,
        )


def _log1mp(theta):
    # log(1 - e^theta) for theta < 0, accurate at both ends
    if theta < -0.6931471805599453:
        return math.log1p(-math.exp(theta))
    return math.log(-math.expm1(theta))


def log_psi(dist: ElementDistribution):
    """Log-partition function; a pair ``(theta, -log(1-p))`` for shnb."""
    t = dist.theta
    if dist.kind == "log":
        return math.log(-_log1mp(t))
    if dist.kind == "ztp":
        lam = math.exp(t)
        if lam > 30.0:
            return lam + math.log1p(-math.exp(-lam))
        return math.log(math.expm1(lam))
    if dist.kind == "geo":
        return t - _log1mp(t)
    return (t, -_log1mp(t))


def kappa_psi(dist: ElementDistribution) -> float:
    """The scalar kappa^T psi(theta)."""
    v = log_psi(dist)
    if dist.kind == "shnb":
        return v[0] + dist.kappa2 * v[1]
    return v


def kappa_psi_prime(dist: ElementDistribution) -> float:
    """Mean of one element, d/dtheta of kappa^T psi(theta)."""
    t = dist.theta
    if dist.kind == "log":
        p = math.exp(t)
        return p / (-math.expm1(t) * -_log1mp(t))
    if dist.kind == "ztp":
        lam = math.exp(t)
        return lam / -math.expm1(-lam)
    if dist.kind == "geo":
        return 1.0 / -math.expm1(t)
    odds = math.exp(t) / -math.expm1(t)
    return 1.0 + dist.kappa2 * odds


def kappa_psi_second(dist: ElementDistribution) -> float:
    """Variance of one element."""
    t = dist.theta
    if dist.kind == "log":
        mu = kappa_psi_prime(dist)
        return mu * (1.0 / -math.expm1(t) - mu)
    if dist.kind == "ztp":
        lam = math.exp(t)
        mu = kappa_psi_prime(dist)
        return mu * (1.0 + lam - mu)
    p = math.exp(t)
    q = -math.expm1(t)
    a = dist.kappa2 if dist.kind == "shnb" else 1.0
    return a * p / (q * q)


def theta_limits(kind: str) -> tuple[float, float]:
    """(theta_raw, theta_bin): raw-data PF and binarized-data PF limits."""
    _check_kind(kind)
    if kind == "ztp":
        return (-math.inf, math.inf)
    return (-math.inf, 0.0)


# --------------------------------------------------------------------------
# Stirling numbers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StirlingRow:
    kind: str
    y: int
    log_values: np.ndarray  # log St(y, n) for n = 1..y


class _StirlingTable:
    """Log-space triangular table, row y stored at [y(y-1)/2, y(y+1)/2).

    Grows on demand under a lock; reads of already-built rows need no lock.
    """

    def __init__(self, kind):
        self.kind = kind
        self.flat = np.zeros(1)  # row y=1: St(1,1) = 1
        self.built = 1
        self._lock = threading.Lock()

    def ensure(self, y):
        if y <= self.built:
            return
        with self._lock:
            if y <= self.built:
                return
            rows = [self.flat]
            prev = self.flat[-self.built:]
            for m in range(self.built, y):
                # row m -> row m+1
                cur = np.empty(m + 1)
                if self.kind == "first":
                    mult = np.full(m, math.log(m))
                else:
                    mult = np.log(np.arange(1, m + 1, dtype=float))
                stay = prev + mult  # n = 1..m
                cur[0] = stay[0]
                cur[1:m] = np.logaddexp(stay[1:], prev[:-1])
                cur[m] = prev[m - 1]
                rows.append(cur)
                prev = cur
            self.flat = np.concatenate(rows)
            self.built = y

    def lookup(self, y, n):
        y = np.asarray(y, dtype=np.int64)
        n = np.asarray(n, dtype=np.int64)
        return self.flat[y * (y - 1) // 2 + n - 1]


_TABLES = {"first": _StirlingTable("first"), "second": _StirlingTable("second")}


def _check_yn(y, n=None):
    ymax = int(np.max(y)) if np.size(y) else 1
    if np.size(y) and int(np.min(y)) < 1:
        raise ValueError("y must be >= 1")
    if ymax > STIRLING_CAP:
        raise ValueError(f"y={ymax} above the Stirling cap {STIRLING_CAP}")
    if n is not None and np.size(n):
        if np.any(np.asarray(n) < 1) or np.any(np.asarray(n) > np.asarray(y)):
            raise ValueError("need 1 <= n <= y")
    return ymax


def log_stirling(kind: str, y, n):
    """Vectorized log of unsigned Stirling numbers (first, second, lah)."""
    ymax = _check_yn(y, n)
    if kind == "lah":
        y = np.asarray(y, dtype=float)
        n = np.asarray(n, dtype=float)
        return (gammaln(y) - gammaln(n) - gammaln(y - n + 1)) + gammaln(y + 1) - gammaln(n + 1)
    table = _TABLES[kind]
    table.ensure(ymax)
    return table.lookup(y, n)


def stirling_row(kind: str, y: int) -> StirlingRow:
    if kind not in ("first", "second", "lah"):
        raise ValueError(f"unknown Stirling kind {kind!r}")
    y = int(y)
    _check_yn(y)
    n = np.arange(1, y + 1)
    vals = np.array(log_stirling(kind, np.full(y, y), n), dtype=float)
    vals.flags.writeable = False
    return StirlingRow(kind, y, vals)


# --------------------------------------------------------------------------
# base measures and pmfs
# --------------------------------------------------------------------------


def log_base_measure_array(kind: str, kappa2: float, y, n):
    """log h(y, n kappa), vectorized over matching y and n arrays."""
    y = np.asarray(y)
    n = np.asarray(n)
    if kind == "shnb":
        _check_yn(y, n)
        y = y.astype(float)
        na = n * kappa2
        return gammaln(y - n + na) - gammaln(y - n + 1.0) - gammaln(na)
    if kind == "geo":
        _check_yn(y, n)
        y = y.astype(float)
        n = n.astype(float)
        return gammaln(y) - gammaln(n) - gammaln(y - n + 1.0)
    st = log_stirling(STIRLING_KIND[kind], y, n)
    return gammaln(np.asarray(n, dtype=float) + 1) - gammaln(np.asarray(y, dtype=float) + 1) + st


def log_base_measure(dist: ElementDistribution, y: int, n: int) -> float:
    if n < 1 or n > y:
        raise ValueError(f"need 1 <= n <= y, got n={n}, y={y}")
    return float(log_base_measure_array(dist.kind, dist.kappa2, np.array([y]), np.array([n]))[0])


def compound_log_pmf(dist: ElementDistribution, y, n):
    """log p(y | n) for the sum of n elements, vectorized over y."""
    y = np.asarray(y)
    return y * dist.theta - n * kappa_psi(dist) + log_base_measure_array(
        dist.kind, dist.kappa2, y, np.full(y.shape, n)
    )


def element_log_pmf(dist: ElementDistribution, x):
    x = np.asarray(x)
    if np.any(x < 1):
        raise ValueError("elements are supported on x >= 1")
    out = compound_log_pmf(dist, x, 1)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def _sample_log(p, rng, size):
    u = rng.random(size)
    x = np.ones(size, dtype=np.int64)
    norm = -math.log1p(-p)
    term = p / norm
    cdf = np.full(size, term)
    active = u > cdf
    k = 1
    while active.any():
        k += 1
        term *= p * (k - 1) / k
        if term < 1e-18:
            # rounding leftovers: put them at the current index
            x[active] = k
            break
        x[active] = k
        cdf[active] += term
        active &= u > cdf
    return x


def _sample_ztp(lam, rng, size):
    if lam < 1e-3:
        # truncated series inversion; rejection would almost never accept
        ks = np.arange(1, 12)
        logpmf = ks * math.log(lam) - gammaln(ks + 1.0) - math.log(math.expm1(lam))
        cdf = np.cumsum(np.exp(logpmf))
        cdf /= cdf[-1]
        u = rng.random(size)
        return ks[np.searchsorted(cdf, u, side="right").clip(max=ks.size - 1)]
    out = rng.poisson(lam, size)
    bad = out == 0
    while bad.any():
        out[bad] = rng.poisson(lam, int(bad.sum()))
        bad = out == 0
    return out.astype(np.int64)


def sample_element(dist: ElementDistribution, rng, size=None):
    """Draw element counts (all >= 1)."""
    shape = () if size is None else size
    n = int(np.prod(shape))
    p = dist.p
    if dist.kind == "geo":
        u = rng.random(n)
        x = 1 + np.floor(np.log1p(-u) / dist.theta).astype(np.int64)
    elif dist.kind == "shnb":
        x = 1 + rng.negative_binomial(dist.kappa2, 1.0 - p, n).astype(np.int64)
    elif dist.kind == "ztp":
        x = _sample_ztp(p, rng, n)
    else:
        x = _sample_log(p, rng, n)
    if size is None:
        return int(x[0])
    return x.reshape(shape)


def sample_compound(dist: ElementDistribution, n, rng) -> np.ndarray:
    """For each session count in ``n`` return the sum of that many elements."""
    n = np.asarray(n, dtype=np.int64)
    flat = n.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.int64)
    pos = np.flatnonzero(flat > 0)
    total = int(flat[pos].sum())
    if total:
        x = sample_element(dist, rng, total)
        starts = np.concatenate(([0], np.cumsum(flat[pos])[:-1]))
        out[pos] = np.add.reduceat(x, starts)
    return out.reshape(n.shape)


# --------------------------------------------------------------------------
# natural parameter estimation
# --------------------------------------------------------------------------


class ThetaSolution(NamedTuple):
    theta: float
    boundary: bool
    iterations: int
    converged: bool


def _bounds(kind):
    return (THETA_MIN, THETA_MAX_ZTP if kind == "ztp" else THETA_MAX_NEG)


def _mean_at(kind, kappa2, theta):
    return kappa_psi_prime(ElementDistribution(kind, theta, kappa2))


def solve_theta(
    kind: str,
    kappa2: float,
    sum_y: float,
    sum_en: float,
    method: str | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> ThetaSolution:
    """Solve kappa^T psi'(theta) = sum_y / sum_en.

    Geo and shnb use their closed forms unless ``method="newton"``; log and
    ztp always use a bracketed Newton iteration with bisection fallback.
    The result is clamped to a closed interior interval of the domain.
    """
    _check_kind(kind)
    if not sum_en > 0:
        raise ValueError("sum_en must be positive")
    if sum_en > sum_y * (1 + 1e-12):
        raise ValueError(f"sum_en={sum_en} exceeds sum_y={sum_y}")
    target = max(sum_y / sum_en, 1.0)
    lo, hi = _bounds(kind)

    if method is None and kind in ("geo", "shnb"):
        a = kappa2 if kind == "shnb" else 1.0
        ratio = (sum_y - sum_en) / (a * sum_en)
        if ratio <= 0:
            return ThetaSolution(lo, True, 0, True)
        theta = math.log(ratio) - math.log1p(ratio)
        if theta < lo:
            return ThetaSolution(lo, True, 0, True)
        if theta > hi:
            return ThetaSolution(hi, True, 0, True)
        return ThetaSolution(theta, False, 0, True)

    if target <= _mean_at(kind, kappa2, lo):
        return ThetaSolution(lo, True, 0, True)
    if target >= _mean_at(kind, kappa2, hi):
        return ThetaSolution(hi, True, 0, True)

    # starting point from the geometric inverse, which is exact for geo
    if kind == "ztp":
        theta = math.log(2.0 * (target - 1.0) if target < 2.0 else target)
    else:
        a = kappa2 if kind == "shnb" else 1.0
        r = (target - 1.0) / a
        theta = math.log(r) - math.log1p(r)
    a_lo, a_hi = lo, hi
    theta = min(max(theta, a_lo), a_hi)
    for it in range(1, max_iter + 1):
        dist = ElementDistribution(kind, theta, kappa2)
        f = kappa_psi_prime(dist) - target
        if abs(f) <= tol * target * 1e-3:
            return ThetaSolution(theta, False, it, True)
        if f > 0:
            a_hi = theta
        else:
            a_lo = theta
        step = f / kappa_psi_second(dist)
        new = theta - step
        if not (a_lo < new < a_hi) or not np.isfinite(new):
            new = 0.5 * (a_lo + a_hi)
        if new == theta or abs(a_hi - a_lo) <= 1e-16 * max(1.0, abs(theta)):
            return ThetaSolution(new, False, it, abs(f) <= tol * target)
        theta = new
    dist = ElementDistribution(kind, theta, kappa2)
    ok = abs(kappa_psi_prime(dist) - target) <= tol * target
    return ThetaSolution(theta, False, max_iter, ok)
