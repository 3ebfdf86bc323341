"""Top-m recommendation, thresholded NDCG and posterior predictive checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dcpf.inference import FittedModel
from dcpf.sparse_data import SparseCountMatrix
from dcpf.synthetic import simulate_counts

DEFAULT_THRESHOLDS = (0, 1, 2, 5)
PPC_BUDGET = 50_000_000
# lower edges; the last bin is open-ended
PPC_EDGES = (1, 2, 3, 6, 11, 31, 101)


class PpcBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class RecommendationList:
    user: int
    items: np.ndarray
    scores: np.ndarray


@dataclass
class EvalReport:
    thresholds: tuple
    m: int
    per_run: list = field(default_factory=list)  # [{s: per-user NDCG array}]
    config: dict = field(default_factory=dict)

    def run_means(self, s) -> np.ndarray:
        return np.array([np.mean(r[s]) if len(r[s]) else np.nan for r in self.per_run])

    def mean(self, s) -> float:
        return float(np.mean(self.run_means(s)))

    def std(self, s) -> float:
        means = self.run_means(s)
        return float(np.std(means)) if means.size > 1 else 0.0

    def n_users(self, s) -> int:
        return int(len(self.per_run[0][s])) if self.per_run else 0

    def lines(self) -> list[str]:
        return [
            f"threshold {s}: {self.mean(s):.6f} ± {self.std(s):.6f} ({self.n_users(s)})"
            for s in self.thresholds
        ]

    def to_record(self) -> dict:
        return {
            "m": self.m,
            "config": self.config,
            "thresholds": {
                str(s): {
                    "mean": self.mean(s),
                    "std": self.std(s),
                    "n_users": self.n_users(s),
                    "run_means": self.run_means(s).tolist(),
                }
                for s in self.thresholds
            },
        }


def _means(model: FittedModel):
    st = model.state
    return st.shape_w / st.rate_w, st.shape_h / st.rate_h


def score(model: FittedModel, user: int, item: int) -> float:
    """Expected number of sessions, sum_k E[w_uk] E[h_ik]."""
    if not (0 <= user < model.n_users and 0 <= item < model.n_items):
        raise IndexError(f"({user}, {item}) out of range {model.n_users}x{model.n_items}")
    ew, eh = _means(model)
    return float(ew[user] @ eh[item])


def score_matrix(model: FittedModel, users=None) -> np.ndarray:
    ew, eh = _means(model)
    if users is not None:
        ew = ew[np.asarray(users)]
    return ew @ eh.T


def _top_unseen(scores, seen, m):
    s = scores.astype(float, copy=True)
    s[seen] = -np.inf
    order = np.argsort(-s, kind="stable")[:m]
    return order, scores[order]


def _train_csr(train: SparseCountMatrix):
    indptr = np.concatenate(([0], np.cumsum(train.row_degrees())))
    return indptr, train.cols


def recommend(model: FittedModel, train: SparseCountMatrix, user: int, m: int = 100) -> RecommendationList:
    """Top-m items the user has no training count for; ties go to the lower index."""
    if train.shape != (model.n_users, model.n_items):
        raise ValueError("train matrix does not match the model dimensions")
    indptr, cols = _train_csr(train)
    seen = cols[indptr[user]:indptr[user + 1]]
    available = model.n_items - seen.size
    if m > available:
        raise ValueError(f"m={m} exceeds the {available} unseen items of user {user}")
    items, scores = _top_unseen(score_matrix(model, [user])[0], seen, m)
    return RecommendationList(user, items, scores)


def _discounts(m):
    return 1.0 / np.log2(np.arange(2, m + 2))


def ndcg_from_relevance(rel, n_relevant, m) -> float:
    disc = _discounts(m)
    dcg = float(np.dot(np.asarray(rel[:m], dtype=float), disc[: len(rel[:m])]))
    idcg = float(disc[: min(n_relevant, m)].sum())
    return dcg / idcg


def ndcg_s(rec: RecommendationList, test: SparseCountMatrix, s: float = 0) -> float:
    """NDCG with relevance 1[y_test > s]; NaN when the user has nothing relevant."""
    if s < 0:
        raise ValueError("threshold must be non-negative")
    mask = test.rows == rec.user
    relevant = set(test.cols[mask][test.values[mask] > s].tolist())
    if not relevant:
        return math.nan
    rel = [1.0 if int(i) in relevant else 0.0 for i in rec.items]
    return ndcg_from_relevance(rel, len(relevant), max(len(rec.items), 1))


def precision_recall(rec: RecommendationList, test: SparseCountMatrix, s: float = 0):
    mask = test.rows == rec.user
    relevant = set(test.cols[mask][test.values[mask] > s].tolist())
    if not relevant or len(rec.items) == 0:
        return math.nan, math.nan
    hits = sum(int(i) in relevant for i in rec.items)
    return hits / len(rec.items), hits / len(relevant)


def evaluate_model(model, train, test, m=100, thresholds=DEFAULT_THRESHOLDS, block=1024):
    """Per-user NDCG-s for every threshold; users without relevant items are skipped."""
    if train.shape != (model.n_users, model.n_items) or test.shape != train.shape:
        raise ValueError("model, train and test dimensions disagree")
    indptr, cols = _train_csr(train)
    tindptr = np.concatenate(([0], np.cumsum(test.row_degrees())))
    disc = _discounts(m)
    out = {s: [] for s in thresholds}
    users = np.flatnonzero(test.row_degrees() > 0)
    for b in range(0, users.size, block):
        ub = users[b:b + block]
        S = score_matrix(model, ub)
        for j, u in enumerate(ub):
            seen = cols[indptr[u]:indptr[u + 1]]
            mu = min(m, model.n_items - seen.size)
            items, _ = _top_unseen(S[j], seen, mu)
            tc = test.cols[tindptr[u]:tindptr[u + 1]]
            tv = test.values[tindptr[u]:tindptr[u + 1]]
            for s in thresholds:
                rel_items = tc[tv > s]
                if rel_items.size == 0:
                    continue
                rel = np.isin(items, rel_items).astype(float)
                dcg = float(rel @ disc[:mu])
                idcg = float(disc[: min(rel_items.size, mu)].sum())
                out[s].append(dcg / idcg if idcg > 0 else 0.0)
    return {s: np.array(v) for s, v in out.items()}


def evaluate(models, train, test, m=100, thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    if isinstance(models, FittedModel):
        models = [models]
    thresholds = tuple(thresholds)
    report = EvalReport(thresholds=thresholds, m=m)
    for model in models:
        report.per_run.append(evaluate_model(model, train, test, m, thresholds))
    if models:
        report.config = {"K": models[0].config.K, "mode": models[0].config.mode, "kind": models[0].config.label}
    return report


# --------------------------------------------------------------------------
# posterior predictive checks
# --------------------------------------------------------------------------


def ppc_simulate(model: FittedModel, rng, plugin_mean: bool = False, budget: int = PPC_BUDGET) -> SparseCountMatrix:
    """Simulate a data set from the fitted generative model.

    Factors are drawn from their variational gammas (or set to the means with
    ``plugin_mean``); PF modes simulate plain Poisson counts.
    """
    U, I = model.n_users, model.n_items
    if U * I > budget:
        raise PpcBudgetError(f"{U}x{I} cells exceed the PPC budget of {budget}")
    st = model.state
    if plugin_mean:
        W, H = st.shape_w / st.rate_w, st.shape_h / st.rate_h
    else:
        W = rng.gamma(st.shape_w, 1.0 / st.rate_w)
        H = rng.gamma(st.shape_h, 1.0 / st.rate_h)
    dist = st.dist if model.config.is_dcpf else None
    data, _ = simulate_counts(W, H, dist, rng)
    return data


def _bin_labels(edges):
    labels = []
    for lo, hi in zip(edges, list(edges[1:]) + [None]):
        if hi is None:
            labels.append(f">{lo - 1}")
        elif hi - lo == 1:
            labels.append(str(lo))
        else:
            labels.append(f"{lo}-{hi - 1}")
    return labels


@dataclass
class PpcHistogram:
    edges: tuple
    labels: list
    observed: np.ndarray
    simulated: np.ndarray
    observed_nnz_pct: float
    simulated_nnz_pct: float

    def table(self) -> str:
        lines = [
            f"# nnz%\tobserved={self.observed_nnz_pct:.4f}\tsimulated={self.simulated_nnz_pct:.4f}",
            "bin\tobserved\tsimulated",
        ]
        for lab, o, s in zip(self.labels, self.observed, self.simulated):
            lines.append(f"{lab}\t{int(o)}\t{int(s)}")
        return "\n".join(lines) + "\n"

    def to_record(self) -> dict:
        return {
            "bins": self.labels,
            "edges": list(self.edges),
            "observed": self.observed.tolist(),
            "simulated": self.simulated.tolist(),
            "observed_nnz_pct": self.observed_nnz_pct,
            "simulated_nnz_pct": self.simulated_nnz_pct,
        }


def _histogram(values, edges):
    idx = np.searchsorted(np.asarray(edges), values, side="right") - 1
    return np.bincount(idx, minlength=len(edges)).astype(np.int64)


def ppc_histogram(train: SparseCountMatrix, simulated: SparseCountMatrix, edges=PPC_EDGES) -> PpcHistogram:
    if train.shape != simulated.shape:
        raise ValueError("dimension mismatch between observed and simulated data")
    cells = train.n_rows * train.n_cols
    return PpcHistogram(
        edges=tuple(edges),
        labels=_bin_labels(edges),
        observed=_histogram(train.values, edges),
        simulated=_histogram(simulated.values, edges),
        observed_nnz_pct=100.0 * train.nnz / cells,
        simulated_nnz_pct=100.0 * simulated.nnz / cells,
    )
