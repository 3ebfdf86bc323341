"""Variational Bayes EM for discrete compound Poisson factorization.

Latent session counts ``n_ui`` live only on the stored entries, so every
per-entry quantity (allocation weights, q(n), shape updates) costs O(nnz)
or O(sum of counts); the dense Poisson term is handled through column sums.

``mode="pf_raw"`` pins E[n] = y and ``mode="pf_bin"`` pins E[n] = 1, giving
plain Poisson factorization on raw and binarized data with the same engine.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.special import digamma, gammaln, logsumexp, xlogy

from dcpf import element_dist as ed
from dcpf.element_dist import ElementDistribution
from dcpf.sparse_data import SparseCountMatrix

logger = logging.getLogger(__name__)

MODES = ("dcpf", "pf_raw", "pf_bin")
KAPPA2_METHODS = ("profile", "em")
KAPPA2_BOUNDS = (1e-6, 1e6)
# closed-form E[n] for log loses digits to cancellation beyond this r
_LOG_CLOSED_FORM_MAX_R = 1e3


class NonFiniteElboError(FloatingPointError):
    pass


@dataclass
class FitConfig:
    K: int = 50
    alpha_w: float = 0.3
    alpha_h: float = 0.3
    tol: float = 1e-5
    max_iters: int = 1000
    seed: int = 0
    mode: str = "dcpf"
    kind: str = "geo"
    y_max: int = 1000
    estimate_theta: bool = True
    estimate_kappa2: bool = True
    fixed_theta: float | None = None
    kappa2_init: float = 1.0
    burn_in: int = 10
    kappa2_method: str = "profile"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not (self.alpha_w > 0 and self.alpha_h > 0):
            raise ValueError("gamma shapes must be positive")
        if not self.tol >= 0:
            raise ValueError("tol must be non-negative (0 runs exactly max_iters sweeps)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "dcpf":
            ed._check_kind(self.kind)
            if self.fixed_theta is not None:
                ElementDistribution(self.kind, self.fixed_theta, self.kappa2_init)
        if self.kappa2_method not in KAPPA2_METHODS:
            raise ValueError(f"kappa2_method must be one of {KAPPA2_METHODS}")
        if self.y_max < 1 or self.y_max > ed.STIRLING_CAP:
            raise ValueError(f"y_max must lie in [1, {ed.STIRLING_CAP}]")

    @property
    def is_dcpf(self) -> bool:
        return self.mode == "dcpf"

    @property
    def learns_theta(self) -> bool:
        return self.is_dcpf and self.estimate_theta and self.fixed_theta is None

    @property
    def learns_kappa2(self) -> bool:
        return self.is_dcpf and self.kind == "shnb" and self.estimate_kappa2

    @property
    def label(self) -> str:
        return self.kind if self.is_dcpf else self.mode


@dataclass
class VariationalState:
    shape_w: np.ndarray  # (U, K)
    rate_w: np.ndarray
    shape_h: np.ndarray  # (I, K)
    rate_h: np.ndarray
    beta_w: np.ndarray  # (U,)
    beta_h: np.ndarray  # (I,)
    dist: ElementDistribution | None = None
    expected_n: np.ndarray | None = None  # (nnz,)
    expected_m: np.ndarray | None = None  # (nnz,), shnb only
    phi: np.ndarray | None = None  # (nnz, K) allocation weights Lambda_uik / Lambda_ui
    log_lambda: np.ndarray | None = None  # (nnz,) log Lambda_ui
    q_flat: np.ndarray | None = None  # q(n) over the flattened supports
    elbo_trace: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.shape_w.shape[1]

    def mean_w(self):
        return self.shape_w / self.rate_w

    def mean_h(self):
        return self.shape_h / self.rate_h

    def copy(self) -> "VariationalState":
        def c(a):
            return None if a is None else a.copy()

        return VariationalState(
            c(self.shape_w), c(self.rate_w), c(self.shape_h), c(self.rate_h),
            c(self.beta_w), c(self.beta_h), self.dist, c(self.expected_n),
            c(self.expected_m), c(self.phi), c(self.log_lambda), c(self.q_flat),
            list(self.elbo_trace),
        )


@dataclass
class FittedModel:
    state: VariationalState
    config: FitConfig
    iterations: int = 0
    final_elbo: float = float("nan")
    converged: bool = False
    theta_boundary: bool = False
    wall_time: float = 0.0

    @property
    def n_users(self) -> int:
        return self.state.shape_w.shape[0]

    @property
    def n_items(self) -> int:
        return self.state.shape_h.shape[0]


def expect_gamma(shape, rate):
    """(E[x], E[log x]) under a Gamma(shape, rate) law."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise ValueError("gamma shape and rate must be positive")
    mean = shape / rate
    mean_log = digamma(shape) - np.log(rate)
    if mean.ndim == 0:
        return float(mean), float(mean_log)
    return mean, mean_log


def gamma_entropy(shape, rate):
    return shape - np.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)


def posterior_n(y: int, r: float | None, dist: ElementDistribution, log_r: float | None = None):
    """q(n) over n = 1..y for a single entry with ``r = Lambda * exp(-kappa psi)``.

    Returns ``(weights, E[n], E[m])``; E[m] is None except for shnb.
    """
    y = int(y)
    if y < 1:
        raise ValueError("y must be >= 1")
    if log_r is None:
        if not r > 0:
            raise ValueError("r must be positive")
        log_r = math.log(r)
    n = np.arange(1, y + 1)
    logw = n * log_r + ed.log_base_measure_array(dist.kind, dist.kappa2, np.full(y, y), n) - gammaln(n + 1.0)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    if dist.kind == "log" and math.exp(log_r) <= _LOG_CLOSED_FORM_MAX_R:
        rr = math.exp(log_r)
        en = rr * (digamma(y + rr) - digamma(rr))
    else:
        en = float(np.dot(n, w))
    en = min(max(en, 1.0), float(y))
    em = None
    if dist.kind == "shnb":
        na = n * dist.kappa2
        em = float(np.dot(w, na * (digamma(y - n + na) - digamma(na))))
    return w, en, em


def limit_behavior_probe(kind, y, lambda_value, theta_sequence, kappa2=1.0):
    """E_q[n] for a single entry along a sequence of natural parameters."""
    out = []
    for theta in theta_sequence:
        dist = ElementDistribution(kind, theta, kappa2)
        log_r = math.log(lambda_value) - ed.kappa_psi(dist)
        out.append(posterior_n(y, None, dist, log_r=log_r)[1])
    return np.array(out)


class _Support:
    """Flattened supports {1..y_e} of q(n) for every stored entry."""

    def __init__(self, y: np.ndarray, kind: str):
        self.y = y
        self.kind = kind
        self.size = int(y.sum())
        self.starts = np.concatenate(([0], np.cumsum(y)[:-1])).astype(np.int64)
        self.entry = np.repeat(np.arange(y.size), y)
        self.n = (np.arange(self.size) - self.starts[self.entry] + 1).astype(np.int64)
        self.nf = self.n.astype(float)
        self.y_flat = y[self.entry]
        self.lgam_n1 = gammaln(self.nf + 1.0)
        self._logh = None if kind == "shnb" else self.compute_logh(1.0)
        self._logh_kappa2 = None

    def compute_logh(self, kappa2):
        return ed.log_base_measure_array(self.kind, kappa2, self.y_flat, self.n)

    def logh(self, kappa2):
        if self.kind != "shnb":
            return self._logh
        if self._logh_kappa2 != kappa2:
            self._logh = self.compute_logh(kappa2)
            self._logh_kappa2 = kappa2
        return self._logh

    def segment_sum(self, v):
        return np.add.reduceat(v, self.starts)


class VBEM:
    """Coordinate-ascent engine bound to one data matrix and configuration."""

    def __init__(self, data: SparseCountMatrix, config: FitConfig):
        self.data = data
        self.config = config
        self.U, self.I = data.shape
        y = data.values.astype(np.int64)
        if y.size and y.max() > config.y_max:
            n_clip = int((y > config.y_max).sum())
            logger.warning("clipping %d counts above y_max=%d", n_clip, config.y_max)
            y = np.minimum(y, config.y_max)
        if config.mode == "pf_bin":
            y = np.ones_like(y)
        self.y = y
        self.yf = y.astype(float)
        self.rows = data.rows
        self.cols = data.cols
        nnz = y.size
        ar = np.arange(nnz)
        self._row_sum = sp.csr_matrix((np.ones(nnz), (self.rows, ar)), shape=(self.U, nnz))
        self._col_sum = sp.csr_matrix((np.ones(nnz), (self.cols, ar)), shape=(self.I, nnz))
        self.support = _Support(y, config.kind) if config.is_dcpf and nnz else None
        self.theta_boundary = False

    # -- initialisation -----------------------------------------------------

    def initial_dist(self) -> ElementDistribution | None:
        cfg = self.config
        if not cfg.is_dcpf:
            return None
        kappa2 = cfg.kappa2_init if cfg.kind == "shnb" else 1.0
        if cfg.fixed_theta is not None:
            return ElementDistribution(cfg.kind, cfg.fixed_theta, kappa2)
        if self.y.size == 0:
            theta = -1.0
        else:
            sol = ed.solve_theta(cfg.kind, kappa2, float(self.yf.sum()), float(self.y.size))
            theta = sol.theta
            if sol.boundary:
                # keep the start away from the boundary
                theta = min(max(theta, -10.0), 10.0 if cfg.kind == "ztp" else -1e-3)
        return ElementDistribution(cfg.kind, theta, kappa2)

    def init_state(self, rng) -> VariationalState:
        cfg = self.config
        U, I, K = self.U, self.I, cfg.K
        shape_w = cfg.alpha_w * rng.uniform(0.5, 1.5, size=(U, K))
        shape_h = cfg.alpha_h * rng.uniform(0.5, 1.5, size=(I, K))
        state = VariationalState(
            shape_w=shape_w,
            rate_w=np.ones((U, K)),
            shape_h=shape_h,
            rate_h=np.ones((I, K)),
            beta_w=np.ones(U),
            beta_h=np.ones(I),
            dist=self.initial_dist(),
        )
        state.expected_n = self._pinned_n() if not cfg.is_dcpf else np.ones(self.y.size)
        return state

    def _pinned_n(self):
        return self.yf.copy()

    # -- CAVI steps ---------------------------------------------------------

    def logits(self, state):
        _, elogw = expect_gamma(state.shape_w, state.rate_w)
        _, elogh = expect_gamma(state.shape_h, state.rate_h)
        return elogw[self.rows] + elogh[self.cols]

    def update_lambda(self, state):
        lg = self.logits(state)
        if lg.shape[0] == 0:
            state.log_lambda = np.zeros(0)
            state.phi = np.zeros((0, state.K))
            return state
        state.log_lambda = logsumexp(lg, axis=1)
        state.phi = np.exp(lg - state.log_lambda[:, None])
        return state

    def update_posterior_n(self, state):
        cfg = self.config
        if not cfg.is_dcpf:
            state.expected_n = self._pinned_n()
            return state
        if self.support is None:
            state.expected_n = np.zeros(0)
            return state
        sup = self.support
        dist = state.dist
        log_r = state.log_lambda - ed.kappa_psi(dist)
        logw = sup.nf * log_r[sup.entry] + sup.logh(dist.kappa2) - sup.lgam_n1
        m = np.maximum.reduceat(logw, sup.starts)
        e = np.exp(logw - m[sup.entry])
        s = sup.segment_sum(e)
        q = e / s[sup.entry]
        state.q_flat = q
        en = sup.segment_sum(sup.nf * q)
        if dist.kind == "log":
            r = np.exp(np.minimum(log_r, 700.0))
            ok = r <= _LOG_CLOSED_FORM_MAX_R
            en = np.where(ok, r * (digamma(self.yf + r) - digamma(r)), en)
        state.expected_n = np.clip(en, 1.0, self.yf)
        if dist.kind == "shnb":
            na = sup.nf * dist.kappa2
            term = na * (digamma(sup.y_flat - sup.nf + na) - digamma(na))
            state.expected_m = sup.segment_sum(q * term)
        return state

    def _allocated(self, state):
        return state.expected_n[:, None] * state.phi

    def update_user_factors(self, state):
        cfg = self.config
        state.shape_w = cfg.alpha_w + np.asarray(self._row_sum @ self._allocated(state))
        eh = state.shape_h / state.rate_h
        state.rate_w = state.beta_w[:, None] + eh.sum(axis=0)[None, :]
        return state

    def update_item_factors(self, state):
        cfg = self.config
        state.shape_h = cfg.alpha_h + np.asarray(self._col_sum @ self._allocated(state))
        ew = state.shape_w / state.rate_w
        state.rate_h = state.beta_h[:, None] + ew.sum(axis=0)[None, :]
        return state

    def update_rates(self, state):
        cfg = self.config
        K = state.K
        state.beta_w = K * cfg.alpha_w / state.mean_w().sum(axis=1)
        state.beta_h = K * cfg.alpha_h / state.mean_h().sum(axis=1)
        return state

    def update_theta_kappa(self, state):
        cfg = self.config
        dist = state.dist
        if not cfg.is_dcpf or self.y.size == 0:
            return state
        sum_y = float(self.yf.sum())
        sum_en = float(state.expected_n.sum())
        sum_en = min(sum_en, sum_y)
        kappa2 = dist.kappa2
        if cfg.learns_kappa2 and state.expected_m is not None:
            neg_log1mp = -ed._log1mp(dist.theta)
            kappa2 = float(state.expected_m.sum()) / (neg_log1mp * sum_en)
            kappa2 = min(max(kappa2, KAPPA2_BOUNDS[0]), KAPPA2_BOUNDS[1])
            if cfg.kappa2_method == "profile":
                kappa2 = self._maximize_kappa2(state, kappa2, sum_y, sum_en)
        theta = dist.theta
        if cfg.learns_theta:
            sol = ed.solve_theta(cfg.kind, kappa2, sum_y, sum_en)
            theta = sol.theta
            self.theta_boundary = sol.boundary
            if not sol.converged:
                logger.warning("theta solver did not converge (theta=%g)", theta)
        state.dist = dist.with_params(theta=theta, kappa2=kappa2)
        return state

    def _profile_terms(self, state, sum_y, sum_en):
        sup = self.support
        active = sup.y_flat > sup.n
        return state.q_flat[active], sup.nf[active], (sup.y_flat - sup.nf)[active]

    def _profile_value(self, a, terms, sum_y, sum_en):
        # bound terms in (theta, a) with theta at its optimum for this a
        q, n, c = terms
        na = n * a
        logh = float(np.dot(q, gammaln(c + na) - gammaln(c + 1.0) - gammaln(na)))
        theta = ed.solve_theta("shnb", a, sum_y, sum_en).theta
        kpsi = ed.kappa_psi(ElementDistribution("shnb", theta, a))
        return theta * sum_y - sum_en * kpsi + logh

    def _maximize_kappa2(self, state, a_em, sum_y, sum_en):
        """Jointly optimal shape with theta profiled out; falls back to the EM value."""
        terms = self._profile_terms(state, sum_y, sum_en)
        q, n, c = terms
        lo, hi = KAPPA2_BOUNDS
        d = sum_y - sum_en
        if q.size == 0 or d <= 0:
            return a_em

        def grad(log_a):
            a = math.exp(log_a)
            na = n * a
            return float(np.dot(q, n * (digamma(c + na) - digamma(na)))) - sum_en * math.log1p(d / (a * sum_en))

        g_lo, g_hi = grad(math.log(lo)), grad(math.log(hi))
        if g_lo <= 0:
            cand = lo
        elif g_hi >= 0:
            cand = hi
        else:
            cand = math.exp(brentq(grad, math.log(lo), math.log(hi), xtol=1e-12, rtol=1e-12))
        if self._profile_value(cand, terms, sum_y, sum_en) >= self._profile_value(a_em, terms, sum_y, sum_en):
            return cand
        return a_em

    # -- objective ----------------------------------------------------------

    def elbo(self, state) -> float:
        cfg = self.config
        ew, elogw = expect_gamma(state.shape_w, state.rate_w)
        eh, elogh = expect_gamma(state.shape_h, state.rate_h)

        total = 0.0
        if self.y.size:
            lg = elogw[self.rows] + elogh[self.cols]
            phi = state.phi
            alloc = (phi * lg).sum(axis=1) - xlogy(phi, phi).sum(axis=1)
            en = state.expected_n
            total += float(np.dot(en, alloc))
            if cfg.is_dcpf:
                sup = self.support
                dist = state.dist
                q = state.q_flat
                total += dist.theta * float(self.yf.sum())
                total -= float(en.sum()) * ed.kappa_psi(dist)
                inner = q * (sup.logh(dist.kappa2) - sup.lgam_n1) - xlogy(q, q)
                total += float(inner.sum())
            else:
                total -= float(gammaln(en + 1.0).sum())

        total -= float(np.dot(ew.sum(axis=0), eh.sum(axis=0)))

        for a, beta, mean, mlog in (
            (cfg.alpha_w, state.beta_w, ew, elogw),
            (cfg.alpha_h, state.beta_h, eh, elogh),
        ):
            prior = a * np.log(beta)[:, None] - gammaln(a) + (a - 1.0) * mlog - beta[:, None] * mean
            total += float(prior.sum())
        total += float(gamma_entropy(state.shape_w, state.rate_w).sum())
        total += float(gamma_entropy(state.shape_h, state.rate_h).sum())

        if not np.isfinite(total):
            bad = []
            if state.expected_n is not None and state.expected_n.size:
                bad = np.flatnonzero(~np.isfinite(state.expected_n))[:5].tolist()
            raise NonFiniteElboError(f"non-finite ELBO; suspicious entries {bad}")
        return total

    # -- driver -------------------------------------------------------------

    def sweep(self, state, iteration: int):
        self.update_lambda(state)
        self.update_posterior_n(state)
        self.update_user_factors(state)
        self.update_item_factors(state)
        self.update_rates(state)
        if iteration > self.config.burn_in:
            self.update_theta_kappa(state)
        return state

    def run(self, rng=None, callback=None, state=None) -> FittedModel:
        cfg = self.config
        if self.y.size == 0:
            raise ValueError("cannot fit an empty matrix")
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        t0 = time.perf_counter()
        if state is None:
            state = self.init_state(rng)
        estimating = cfg.learns_theta or cfg.learns_kappa2
        converged = False
        prev = None
        it = 0
        for it in range(1, cfg.max_iters + 1):
            self.sweep(state, it)
            value = self.elbo(state)
            state.elbo_trace.append(value)
            if callback is not None:
                callback(it, value, state)
            if prev is not None:
                rel = abs((value - prev) / value)
                if cfg.tol > 0 and rel < cfg.tol and (not estimating or it > cfg.burn_in):
                    converged = True
                    break
            prev = value
        return FittedModel(
            state=state,
            config=cfg,
            iterations=it,
            final_elbo=state.elbo_trace[-1],
            converged=converged,
            theta_boundary=self.theta_boundary,
            wall_time=time.perf_counter() - t0,
        )


def init_state(config: FitConfig, data: SparseCountMatrix, rng) -> VariationalState:
    return VBEM(data, config).init_state(rng)


def elbo(state: VariationalState, data: SparseCountMatrix, config: FitConfig) -> float:
    return VBEM(data, config).elbo(state)


def fit(data: SparseCountMatrix, config: FitConfig, rng=None, callback=None) -> FittedModel:
    """Run VBEM until the relative ELBO increment drops below ``config.tol``."""
    return VBEM(data, config).run(rng=rng, callback=callback)


# --------------------------------------------------------------------------
# model directory I/O
# --------------------------------------------------------------------------


def _fmt(x) -> str:
    return "%.17g" % float(x)


def _write_factor_file(path, shape, rate):
    inter = np.empty((shape.shape[0], 2 * shape.shape[1]))
    inter[:, 0::2] = shape
    inter[:, 1::2] = rate
    with open(path, "w") as fh:
        for row in inter:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def _read_factor_file(path, n, K):
    vals = np.loadtxt(path, dtype=float, ndmin=2) if n else np.zeros((0, 2 * K))
    return vals[:, 0::2].copy(), vals[:, 1::2].copy()


def save_model(model: FittedModel, path) -> None:
    """Write ``meta``, ``user_factors``, ``item_factors`` and ``rates`` into a directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    st, cfg = model.state, model.config
    dist = st.dist
    meta = {
        "K": str(cfg.K),
        "mode": cfg.mode,
        "kind": cfg.kind if cfg.is_dcpf else "none",
        "theta": _fmt(dist.theta) if dist else "nan",
        "kappa2": _fmt(dist.kappa2) if dist else "nan",
        "alpha_w": _fmt(cfg.alpha_w),
        "alpha_h": _fmt(cfg.alpha_h),
        "seed": str(cfg.seed),
        "iterations": str(model.iterations),
        "final_elbo": _fmt(model.final_elbo),
        "n_users": str(model.n_users),
        "n_items": str(model.n_items),
        "converged": str(model.converged).lower(),
        "theta_boundary": str(model.theta_boundary).lower(),
    }
    with open(path / "meta", "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}: {v}\n")
    _write_factor_file(path / "user_factors", st.shape_w, st.rate_w)
    _write_factor_file(path / "item_factors", st.shape_h, st.rate_h)
    with open(path / "rates", "w") as fh:
        for v in np.concatenate([st.beta_w, st.beta_h]):
            fh.write(_fmt(v) + "\n")


def load_model(path) -> FittedModel:
    path = Path(path)
    meta = {}
    with open(path / "meta") as fh:
        for line in fh:
            if ":" in line:
                k, v = line.split(":", 1)
                meta[k.strip()] = v.strip()
    K = int(meta["K"])
    U, I = int(meta["n_users"]), int(meta["n_items"])
    mode = meta["mode"]
    kind = meta["kind"] if mode == "dcpf" else "geo"
    cfg = FitConfig(
        K=K,
        alpha_w=float(meta["alpha_w"]),
        alpha_h=float(meta["alpha_h"]),
        seed=int(meta["seed"]),
        mode=mode,
        kind=kind,
    )
    shape_w, rate_w = _read_factor_file(path / "user_factors", U, K)
    shape_h, rate_h = _read_factor_file(path / "item_factors", I, K)
    rates = np.loadtxt(path / "rates", dtype=float, ndmin=1)
    dist = None
    if mode == "dcpf":
        dist = ElementDistribution(kind, float(meta["theta"]), float(meta["kappa2"]))
    state = VariationalState(shape_w, rate_w, shape_h, rate_h, rates[:U].copy(), rates[U:].copy(), dist)
    return FittedModel(
        state=state,
        config=replace(cfg),
        iterations=int(meta["iterations"]),
        final_elbo=float(meta["final_elbo"]),
        converged=meta.get("converged") == "true",
        theta_boundary=meta.get("theta_boundary") == "true",
    )
